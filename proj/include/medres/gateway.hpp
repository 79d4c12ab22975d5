#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "medres/core.hpp"

namespace medres {

inline constexpr double kDefaultTemperature = 0.2;
inline constexpr int kDefaultMaxTokens = 512;

struct ChatRequest {
  std::string prompt_text;
  double temperature = kDefaultTemperature;
  int max_tokens = kDefaultMaxTokens;
  std::string backend_id;
};

// Throws InvalidArgument for an empty prompt, temperature outside [0, 2]
// or a non-positive token budget.
void validate(const ChatRequest& request);

struct ChatResponse {
  std::string text;
  std::chrono::milliseconds latency{0};
  std::string backend_id;
  // Set when the backend stopped on its token limit; the only case in
  // which `text` may be empty.
  bool truncated = false;
};

struct GuardVerdict {
  bool passed = true;
  std::string reason;

  explicit operator bool() const noexcept { return passed; }
};

// Outbound filter. Fails a payload that contains any registered locator
// (case-insensitive), any registered raw-byte sentinel, control bytes other
// than tab/CR/LF, or invalid UTF-8.
class PrivacyGuard {
 public:
  PrivacyGuard() = default;

  void deny(std::string locator);
  void deny_study(const StudyPair& study);
  void add_sentinel(std::string bytes);

  GuardVerdict check(std::string_view payload) const;
  GuardVerdict check(const ChatRequest& request) const { return check(request.prompt_text); }

  // Registered locators, lowercased.
  const std::vector<std::string>& denylist() const noexcept { return denylist_; }

  // Magic numbers of common image containers (PNG, JPEG, DICOM preamble).
  static PrivacyGuard with_default_sentinels();

 private:
  std::vector<std::string> denylist_;
  std::vector<std::string> sentinels_;
};

GuardVerdict privacy_guard(const ChatRequest& request, const PrivacyGuard& guard);

// Every backend validates the request and runs the guard before its
// transport sees the prompt.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;

  ChatResponse complete(const ChatRequest& request, const PrivacyGuard& guard);
  ChatResponse complete(const ChatRequest& request);

  virtual std::string id() const = 0;

 protected:
  virtual ChatResponse do_complete(const ChatRequest& request) = 0;
};

// Replays canned responses in order. Calls are serialized, so the i-th call
// always gets the i-th entry. Empty entries are reported as truncated.
class ScriptedBackend final : public ChatBackend {
 public:
  explicit ScriptedBackend(std::vector<std::string> script, std::string id = "scripted");

  std::string id() const override { return id_; }
  std::size_t calls() const;
  std::vector<std::string> prompts_seen() const;

 protected:
  ChatResponse do_complete(const ChatRequest& request) override;

 private:
  std::vector<std::string> script_;
  std::string id_;
  mutable std::mutex mutex_;
  std::size_t cursor_ = 0;
  std::vector<std::string> prompts_;
};

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{500};
  std::chrono::milliseconds max_backoff{30'000};

  // Delay before retry number `retry` (0-based): base * 2^retry, capped.
  std::chrono::milliseconds delay(int retry) const;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct RemoteChatConfig {
  // e.g. "https://api.openai.com/v1"; "/chat/completions" is appended.
  std::string base_url;
  std::string model;
  std::string api_key_env = "MEDRES_API_KEY";
  RetryPolicy retry;
  int max_in_flight = 4;
  std::chrono::seconds timeout{120};
  std::string id = "remote";
};

// OpenAI-compatible request body: a single user message carrying the whole
// prompt. Field order and spelling are fixed in docs/wire.md.
std::string make_chat_request_body(const ChatRequest& request, std::string_view model);

// Extracts choices[0].message.content. Throws BackendError when the body
// does not have that shape or the text is empty without finish_reason
// "length".
ChatResponse parse_chat_response_body(std::string_view body);

class RemoteChatBackend final : public ChatBackend {
 public:
  explicit RemoteChatBackend(RemoteChatConfig config, Sleeper sleeper = {});
  ~RemoteChatBackend() override;

  std::string id() const override { return config_.id; }
  // Transport attempts made so far, across all calls.
  std::size_t attempts() const noexcept;

 protected:
  ChatResponse do_complete(const ChatRequest& request) override;

 private:
  struct Impl;
  RemoteChatConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace medres
