#include "medres/gateway.hpp"

#include <algorithm>
#include <cstdlib>

#include <json.hpp>

#include "http_poster.hpp"
#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres {

using json = nlohmann::json;

void validate(const ChatRequest& request) {
  if (request.prompt_text.empty()) throw InvalidArgument("chat request has an empty prompt");
  if (!(request.temperature >= 0.0 && request.temperature <= 2.0)) {
    throw InvalidArgument("temperature must lie in [0, 2]");
  }
  if (request.max_tokens <= 0) throw InvalidArgument("max_tokens must be positive");
}

namespace {

// Length of the UTF-8 sequence starting at s[i], or 0 if malformed.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i) {
  const auto lead = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  std::uint32_t min_code = 0;
  std::uint32_t code = 0;
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) {
    len = 2;
    code = lead & 0x1F;
    min_code = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    len = 3;
    code = lead & 0x0F;
    min_code = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    len = 4;
    code = lead & 0x07;
    min_code = 0x10000;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto c = static_cast<unsigned char>(s[i + k]);
    if ((c & 0xC0) != 0x80) return 0;
    code = (code << 6) | (c & 0x3F);
  }
  if (code < min_code || code > 0x10FFFF || (code >= 0xD800 && code <= 0xDFFF)) return 0;
  return len;
}

}  // namespace

void PrivacyGuard::deny(std::string locator) {
  if (text::trim(locator).empty()) return;
  locator = text::to_lower(locator);
  if (std::find(denylist_.begin(), denylist_.end(), locator) == denylist_.end()) {
    denylist_.push_back(std::move(locator));
  }
}

void PrivacyGuard::deny_study(const StudyPair& study) {
  deny(study.main.source_uri);
  deny(study.reference.source_uri);
}

void PrivacyGuard::add_sentinel(std::string bytes) {
  if (!bytes.empty()) sentinels_.push_back(std::move(bytes));
}

PrivacyGuard PrivacyGuard::with_default_sentinels() {
  PrivacyGuard guard;
  guard.add_sentinel("\x89PNG");
  guard.add_sentinel("\xFF\xD8\xFF");
  guard.add_sentinel(std::string("DICM\x02\x00", 6));
  return guard;
}

GuardVerdict PrivacyGuard::check(std::string_view payload) const {
  const std::string lowered = denylist_.empty() ? std::string() : text::to_lower(payload);
  for (const std::string& locator : denylist_) {
    if (lowered.find(locator) != std::string::npos) {
      return {false, "payload contains a registered image locator"};
    }
  }
  for (const std::string& sentinel : sentinels_) {
    if (payload.find(sentinel) != std::string_view::npos) {
      return {false, "payload contains a raw image byte signature"};
    }
  }
  for (std::size_t i = 0; i < payload.size();) {
    const auto c = static_cast<unsigned char>(payload[i]);
    if (c < 0x20 && c != '\n' && c != '\r' && c != '\t') {
      return {false, "payload contains binary control bytes"};
    }
    if (c == 0x7F) return {false, "payload contains binary control bytes"};
    const std::size_t len = utf8_sequence_length(payload, i);
    if (len == 0) return {false, "payload is not valid UTF-8 text"};
    i += len;
  }
  return {};
}

GuardVerdict privacy_guard(const ChatRequest& request, const PrivacyGuard& guard) {
  return guard.check(request);
}

ChatResponse ChatBackend::complete(const ChatRequest& request, const PrivacyGuard& guard) {
  validate(request);
  if (const GuardVerdict verdict = guard.check(request); !verdict) {
    throw PrivacyViolation(verdict.reason);
  }
  const auto start = std::chrono::steady_clock::now();
  ChatResponse response = do_complete(request);
  response.latency =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
  response.backend_id = id();
  if (response.text.empty() && !response.truncated) {
    throw BackendError("backend " + id() + " returned empty text without signalling truncation");
  }
  return response;
}

ChatResponse ChatBackend::complete(const ChatRequest& request) {
  static const PrivacyGuard kBaseline = PrivacyGuard::with_default_sentinels();
  return complete(request, kBaseline);
}

ScriptedBackend::ScriptedBackend(std::vector<std::string> script, std::string id)
    : script_(std::move(script)), id_(std::move(id)) {}

std::size_t ScriptedBackend::calls() const {
  std::lock_guard lock(mutex_);
  return cursor_;
}

std::vector<std::string> ScriptedBackend::prompts_seen() const {
  std::lock_guard lock(mutex_);
  return prompts_;
}

ChatResponse ScriptedBackend::do_complete(const ChatRequest& request) {
  std::lock_guard lock(mutex_);
  if (cursor_ >= script_.size()) {
    throw ScriptExhausted("script of backend " + id_ + " exhausted after " + std::to_string(script_.size()) +
                          " response(s)");
  }
  prompts_.push_back(request.prompt_text);
  ChatResponse response;
  response.text = script_[cursor_++];
  response.truncated = response.text.empty();
  return response;
}

std::chrono::milliseconds RetryPolicy::delay(int retry) const {
  std::chrono::milliseconds wait = backoff_base;
  for (int i = 0; i < retry && wait < max_backoff; ++i) wait *= 2;
  return std::min(wait, max_backoff);
}

std::string make_chat_request_body(const ChatRequest& request, std::string_view model) {
  // nlohmann::json sorts keys, which keeps the body byte-stable.
  json body;
  body["model"] = std::string(model);
  body["messages"] = json::array({json{{"role", "user"}, {"content", request.prompt_text}}});
  body["temperature"] = request.temperature;
  body["max_tokens"] = request.max_tokens;
  body["stream"] = false;
  return body.dump();
}

ChatResponse parse_chat_response_body(std::string_view body) {
  json parsed;
  try {
    parsed = json::parse(body);
  } catch (const json::parse_error& e) {
    throw BackendError(std::string("chat response is not JSON: ") + e.what());
  }
  try {
    const json& choice = parsed.at("choices").at(0);
    const json& content = choice.at("message").at("content");
    ChatResponse response;
    response.text = content.is_null() ? std::string() : content.get<std::string>();
    const auto finish = choice.find("finish_reason");
    response.truncated = finish != choice.end() && finish->is_string() && finish->get<std::string>() == "length";
    if (response.text.empty() && !response.truncated) {
      throw BackendError("chat response has empty content without finish_reason \"length\"");
    }
    return response;
  } catch (const json::exception& e) {
    throw BackendError(std::string("chat response has an unexpected shape: ") + e.what());
  }
}

struct RemoteChatBackend::Impl {
  template <typename... Args>
  explicit Impl(Args&&... args) : poster(std::forward<Args>(args)...) {}
  detail::JsonPoster poster;
};

RemoteChatBackend::RemoteChatBackend(RemoteChatConfig config, Sleeper sleeper)
    : config_(std::move(config)),
      impl_(std::make_unique<Impl>(config_.base_url, config_.timeout, config_.retry, std::move(sleeper),
                                   config_.max_in_flight)) {
  if (config_.model.empty()) throw InvalidArgument("remote chat backend needs a model name");
}

RemoteChatBackend::~RemoteChatBackend() = default;

std::size_t RemoteChatBackend::attempts() const noexcept { return impl_->poster.attempts(); }

ChatResponse RemoteChatBackend::do_complete(const ChatRequest& request) {
  detail::Headers headers;
  if (!config_.api_key_env.empty()) {
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key != nullptr && *key != '\0') {
      headers.emplace_back("Authorization", std::string("Bearer ") + key);
    }
  }
  const std::string body = make_chat_request_body(request, config_.model);
  return parse_chat_response_body(impl_->poster.post("/chat/completions", body, headers));
}

}  // namespace medres
