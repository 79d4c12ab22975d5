#include "http_poster.hpp"

#include <algorithm>
#include <optional>
#include <thread>

#include <httplib.h>

#include "medres/error.hpp"

namespace medres::detail {

Endpoint parse_base_url(std::string_view url) {
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) throw InvalidArgument("base URL needs a scheme: " + std::string(url));
  const std::size_t path_start = url.find('/', scheme_end + 3);
  Endpoint ep;
  if (path_start == std::string_view::npos) {
    ep.scheme_host_port = std::string(url);
  } else {
    ep.scheme_host_port = std::string(url.substr(0, path_start));
    ep.path_prefix = std::string(url.substr(path_start));
    while (!ep.path_prefix.empty() && ep.path_prefix.back() == '/') ep.path_prefix.pop_back();
  }
  return ep;
}

JsonPoster::JsonPoster(std::string_view base_url, std::chrono::seconds timeout, RetryPolicy retry,
                       Sleeper sleeper, int max_in_flight)
    : endpoint_(parse_base_url(base_url)),
      timeout_(timeout),
      retry_(retry),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })),
      in_flight_(std::make_unique<std::counting_semaphore<>>(std::max(1, max_in_flight))) {
  if (retry_.max_retries < 0) throw InvalidArgument("max_retries must be non-negative");
}

namespace {

std::optional<std::chrono::milliseconds> retry_after(const httplib::Result& res) {
  if (!res || !res->has_header("Retry-After")) return std::nullopt;
  try {
    const double seconds = std::stod(res->get_header_value("Retry-After"));
    if (seconds < 0) return std::nullopt;
    return std::chrono::milliseconds(static_cast<long long>(seconds * 1000));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

struct SlotGuard {
  std::counting_semaphore<>& sem;
  explicit SlotGuard(std::counting_semaphore<>& s) : sem(s) { sem.acquire(); }
  ~SlotGuard() { sem.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;
};

}  // namespace

std::string JsonPoster::post(std::string_view path, const std::string& body, const Headers& headers) {
  const std::string full_path = endpoint_.path_prefix + std::string(path);
  httplib::Headers hdrs;
  for (const auto& [k, v] : headers) hdrs.emplace(k, v);

  std::string last_error;
  bool last_rate_limited = false;
  for (int attempt = 0; attempt <= retry_.max_retries; ++attempt) {
    std::optional<std::chrono::milliseconds> hinted;
    {
      SlotGuard slot(*in_flight_);
      ++attempts_;
      httplib::Client client(endpoint_.scheme_host_port);
      client.set_connection_timeout(timeout_);
      client.set_read_timeout(timeout_);
      client.set_write_timeout(timeout_);
      const httplib::Result res = client.Post(full_path, hdrs, body, "application/json");
      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        last_rate_limited = false;
      } else if (res->status == 200) {
        return res->body;
      } else if (res->status == 429) {
        last_error = "rate limited (HTTP 429)";
        last_rate_limited = true;
        hinted = retry_after(res);
      } else if (res->status >= 500) {
        last_error = "server error (HTTP " + std::to_string(res->status) + ")";
        last_rate_limited = false;
      } else {
        throw BackendError("request rejected (HTTP " + std::to_string(res->status) + "): " + res->body);
      }
    }
    if (attempt < retry_.max_retries) {
      std::chrono::milliseconds wait = retry_.delay(attempt);
      if (hinted) wait = std::min(std::max(wait, *hinted), retry_.max_backoff);
      sleeper_(wait);
    }
  }
  const std::string message = last_error + " after " + std::to_string(retry_.max_retries + 1) + " attempt(s)";
  if (last_rate_limited) throw RateLimited(message);
  throw TransportError(message);
}

}  // namespace medres::detail
