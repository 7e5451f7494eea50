#include <httplib.h>
#include <json.hpp>

#include "opcomm/errors.hpp"
#include "opcomm/insight.hpp"

namespace opcomm::insight {

HttpTextRefiner::HttpTextRefiner(std::string host, int port, std::string path, std::chrono::milliseconds timeout)
    : host_(std::move(host)), port_(port), path_(std::move(path)), timeout_(timeout) {}

std::string HttpTextRefiner::refine(const std::string& draft) {
  httplib::Client client(host_, port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  const nlohmann::json request = {{"draft", draft}};
  auto res = client.Post(path_, request.dump(), "application/json");
  if (!res) throw FormatError("text service unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) throw FormatError("text service returned HTTP " + std::to_string(res->status));
  const auto body = nlohmann::json::parse(res->body, nullptr, false);
  if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
    throw FormatError("text service response lacks a string 'text' field");
  }
  return body["text"].get<std::string>();
}

}  // namespace opcomm::insight
