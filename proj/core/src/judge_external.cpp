#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "steerkit/errors.hpp"
#include "steerkit/judge.hpp"

namespace steerkit {

namespace {

struct Endpoint {
  std::string host;  // scheme://host:port
  std::string path;
};

Endpoint parse_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw ValidationError("judge endpoint must look like http://host[:port]/path");
  const auto path_begin = url.find('/', scheme_end + 3);
  Endpoint ep;
  if (path_begin == std::string::npos) {
    ep.host = url;
    ep.path = "/";
  } else {
    ep.host = url.substr(0, path_begin);
    ep.path = url.substr(path_begin);
  }
  return ep;
}

}  // namespace

struct LlmClient::Impl {
  ExternalJudgeConfig config;
  Endpoint endpoint;
  std::string token;

  std::mutex mutex;
  std::condition_variable slot_free;
  int in_flight = 0;

  std::mutex audit_mutex;

  void acquire() {
    std::unique_lock lock(mutex);
    slot_free.wait(lock, [&] { return in_flight < config.max_in_flight; });
    ++in_flight;
  }

  void release() {
    {
      std::lock_guard lock(mutex);
      --in_flight;
    }
    slot_free.notify_one();
  }

  void audit(const std::string& prompt, const std::string& response) {
    if (config.audit_log.empty()) return;
    std::lock_guard lock(audit_mutex);
    std::ofstream out(config.audit_log, std::ios::app);
    nlohmann::json rec{{"model", config.model},
                       {"prompt", prompt},
                       {"response", response}};
    out << rec.dump() << "\n";
  }
};

LlmClient::LlmClient(ExternalJudgeConfig config) : impl_(new Impl) {
  if (config.endpoint.empty())
    throw ValidationError("external judge: endpoint required");
  impl_->endpoint = parse_endpoint(config.endpoint);
  const char* token = std::getenv(config.auth_env.c_str());
  if (token == nullptr || *token == '\0')
    throw JudgeError("external judge: auth token env var '" + config.auth_env +
                     "' is not set");
  impl_->token = token;
  impl_->config = std::move(config);
}

LlmClient::~LlmClient() = default;

const ExternalJudgeConfig& LlmClient::config() const { return impl_->config; }

std::string LlmClient::complete(const std::string& prompt) {
  impl_->acquire();
  struct Release {
    Impl* impl;
    ~Release() { impl->release(); }
  } releaser{impl_.get()};

  const nlohmann::json body{
      {"model", impl_->config.model},
      {"messages", nlohmann::json::array(
                       {{{"role", "user"}, {"content", prompt}}})}};
  const std::string payload = body.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= impl_->config.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay =
          impl_->config.backoff_seconds * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Client client(impl_->endpoint.host);
    client.set_connection_timeout(impl_->config.timeout_seconds);
    client.set_read_timeout(impl_->config.timeout_seconds);
    client.set_default_headers(
        {{"Authorization", "Bearer " + impl_->token}});
    auto res = client.Post(impl_->endpoint.path, payload, "application/json");
    if (!res) {
      last_error = "transport error (" + httplib::to_string(res.error()) + ")";
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("choices") ||
        reply["choices"].empty()) {
      last_error = "malformed completion body";
      continue;
    }
    const std::string text =
        reply["choices"][0]["message"]["content"].get<std::string>();
    impl_->audit(prompt, text);
    return text;
  }
  throw JudgeError("external judge: retries exhausted: " + last_error);
}

ExternalSteeringJudge::ExternalSteeringJudge(std::shared_ptr<LlmClient> client)
    : client_(std::move(client)) {}

namespace {

double rated_call(LlmClient& client, const std::string& prompt) {
  std::string last_error;
  for (int attempt = 0; attempt <= client.config().max_retries; ++attempt) {
    const std::string response = client.complete(prompt);
    try {
      return parse_rating(response);
    } catch (const JudgeError& e) {
      last_error = e.what();
    }
  }
  throw JudgeError("external judge: unparseable ratings: " + last_error);
}

}  // namespace

Rating ExternalSteeringJudge::rate(const std::string& sentence,
                                   const std::string& concept_text,
                                   const std::string& instruction) {
  const double c = rated_call(
      *client_, render_template(TemplateKind::Concept,
                                {{"concept", concept_text}, {"sentence", sentence}}));
  const double i = rated_call(
      *client_,
      render_template(TemplateKind::Instruction,
                      {{"instruction", instruction}, {"sentence", sentence}}));
  const double f = rated_call(
      *client_,
      render_template(TemplateKind::Fluency, {{"sentence", sentence}}));
  return Rating(c, i, f);
}

}  // namespace steerkit
