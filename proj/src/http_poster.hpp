#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "medres/gateway.hpp"

namespace medres::detail {

struct Endpoint {
  std::string scheme_host_port;
  std::string path_prefix;
};

// "http://host:8080/v1" -> {"http://host:8080", "/v1"}.
Endpoint parse_base_url(std::string_view url);

using Headers = std::vector<std::pair<std::string, std::string>>;

// POSTs JSON with bounded retries. Connection failures, 429 and 5xx are
// retried with exponential backoff; other 4xx fail immediately with
// BackendError. A fresh client per attempt keeps concurrent callers apart.
class JsonPoster {
 public:
  JsonPoster(std::string_view base_url, std::chrono::seconds timeout, RetryPolicy retry, Sleeper sleeper,
             int max_in_flight);

  std::string post(std::string_view path, const std::string& body, const Headers& headers);
  std::size_t attempts() const noexcept { return attempts_.load(); }

 private:
  Endpoint endpoint_;
  std::chrono::seconds timeout_;
  RetryPolicy retry_;
  Sleeper sleeper_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
  std::atomic<std::size_t> attempts_{0};
};

}  // namespace medres::detail
