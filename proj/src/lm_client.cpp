#include "cqr/lm_client.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "cqr/errors.hpp"
#include "cqr/util.hpp"
#include "httplib.h"
#include "json.hpp"

namespace cqr {

using nlohmann::json;

void GenerationParams::validate() const {
    if (!(temperature >= 0.0)) throw ParameterError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ParameterError("top_p must be in (0, 1]");
    if (max_tokens < 1) throw ParameterError("max_tokens must be >= 1");
}

std::vector<BatchItem<std::string>> LmClient::batch_complete(const std::string& model_ref,
                                                             const std::vector<std::string>& prompts,
                                                             const GenerationParams& params,
                                                             unsigned max_in_flight) {
    std::vector<BatchItem<std::string>> results(prompts.size());
    parallel_for(prompts.size(), std::max(1u, max_in_flight), [&](std::size_t i) {
        try {
            results[i].value = complete(model_ref, prompts[i], params);
        } catch (const std::exception& e) {
            results[i].error = e.what();
        }
    });
    return results;
}

std::vector<BatchItem<ScoredCompletion>> LmClient::batch_score(
    const std::string& model_ref, const std::vector<ScoreRequest>& requests,
    unsigned max_in_flight) {
    std::vector<BatchItem<ScoredCompletion>> results(requests.size());
    parallel_for(requests.size(), std::max(1u, max_in_flight), [&](std::size_t i) {
        try {
            results[i].value = score(model_ref, requests[i].context, requests[i].continuation);
        } catch (const std::exception& e) {
            results[i].error = e.what();
        }
    });
    return results;
}

std::string MockLmClient::complete(const std::string& model_ref, const std::string& prompt,
                                   const GenerationParams& params) {
    params.validate();
    complete_calls_.fetch_add(1);
    if (auto it = canned_.find(prompt); it != canned_.end()) return it->second;
    if (hook_) {
        if (auto text = hook_(prompt, params)) return *text;
    }
    std::uint64_t h = fnv1a64(prompt, fnv1a64(model_ref, seed_ ^ 0x6d6f636bULL));
    h = mix_seeds(h, params.seed.value_or(0));
    std::ostringstream out;
    for (int w = 0; w < 8; ++w) {
        h = splitmix64(h);
        if (w) out << ' ';
        out << 'w' << (h % 241);
    }
    return out.str();
}

ScoredCompletion MockLmClient::score(const std::string& model_ref, const std::string& context,
                                     const std::string& continuation) {
    if (continuation.empty()) throw ParameterError("continuation must be non-empty");
    std::uint64_t h = fnv1a64(continuation, fnv1a64(context, fnv1a64(model_ref, seed_)));
    // map into [-50, -0.1]
    double unit = static_cast<double>(h >> 11) / static_cast<double>(1ULL << 53);
    return {continuation, -0.1 - unit * 49.9};
}

void MockLmClient::set_response(const std::string& prompt, const std::string& text) {
    canned_[prompt] = text;
}

void MockLmClient::set_hook(Hook hook) { hook_ = std::move(hook); }

std::chrono::milliseconds RetryPolicy::delay_before(unsigned attempt) const {
    auto d = base_delay;
    for (unsigned i = 1; i < attempt; ++i) d *= 2;
    return d;
}

RequestLog::RequestLog(const std::filesystem::path& dest, std::string run_id)
    : dest_(dest), run_id_(std::move(run_id)) {}

void RequestLog::record(const std::string& op, const std::string& model_ref, unsigned attempts,
                        std::size_t prompt_chars, std::size_t output_chars,
                        const std::string& status) {
    std::lock_guard lock(mu_);
    std::ofstream out(dest_, std::ios::app);
    json rec{{"run_id", run_id_}, {"seq", seq_++},         {"op", op},
             {"model", model_ref}, {"attempts", attempts},  {"prompt_chars", prompt_chars},
             {"output_chars", output_chars}, {"status", status}};
    out << rec.dump() << '\n';
}

HttpLmClient::HttpLmClient(Options options) : options_(std::move(options)) {
    if (const char* key = std::getenv(options_.api_key_env.c_str())) api_key_ = key;
}

HttpLmClient::~HttpLmClient() = default;

namespace {

bool transient_status(int status) {
    return status == 429 || status == 500 || status == 502 || status == 503 || status == 504;
}

}  // namespace

std::string HttpLmClient::post_chat(const std::string& body, const std::string& op,
                                    const std::string& model_ref) {
    httplib::Client cli(options_.base_url);
    cli.set_connection_timeout(options_.timeout);
    cli.set_read_timeout(options_.timeout);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    std::string last_failure = "no attempt made";
    for (unsigned attempt = 1; attempt <= options_.retry.max_attempts; ++attempt) {
        if (attempt > 1) std::this_thread::sleep_for(options_.retry.delay_before(attempt - 1));
        auto res = cli.Post(options_.chat_path, headers, body, "application/json");
        if (!res) {
            last_failure = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 401 || res->status == 403) {
            if (log_) log_->record(op, model_ref, attempt, body.size(), 0, "credential");
            throw CredentialError("backend rejected credential (HTTP " +
                                  std::to_string(res->status) + ")");
        }
        if (transient_status(res->status)) {
            last_failure = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            if (log_) log_->record(op, model_ref, attempt, body.size(), 0, "protocol");
            throw ProtocolError("unexpected HTTP status " + std::to_string(res->status));
        }
        last_retries_.store(attempt - 1);
        if (log_) log_->record(op, model_ref, attempt, body.size(), res->body.size(), "ok");
        return res->body;
    }
    if (log_) log_->record(op, model_ref, options_.retry.max_attempts, body.size(), 0, "transport");
    throw TransportError("retries exhausted (" + std::to_string(options_.retry.max_attempts) +
                         " attempts): " + last_failure);
}

std::string HttpLmClient::complete(const std::string& model_ref, const std::string& prompt,
                                   const GenerationParams& params) {
    params.validate();
    json messages = json::array({json{{"role", "user"}, {"content", prompt}}});
    json req{{"model", model_ref},
             {"messages", messages},
             {"temperature", params.temperature},
             {"top_p", params.top_p},
             {"max_tokens", params.max_tokens}};
    if (params.seed) req["seed"] = *params.seed;

    json res = json::parse(post_chat(req.dump(), "complete", model_ref), nullptr, false);
    if (res.is_discarded()) throw ProtocolError("response is not valid JSON");
    const json* content = res.contains("choices") && !res["choices"].empty()
                              ? &res["choices"][0]
                              : nullptr;
    if (!content || !content->contains("message") || !(*content)["message"].contains("content") ||
        !(*content)["message"]["content"].is_string())
        throw ProtocolError("response missing completion text");
    std::string text = (*content)["message"]["content"].get<std::string>();
    if (text.empty()) throw ProtocolError("backend returned empty completion");
    return text;
}

ScoredCompletion HttpLmClient::score(const std::string& model_ref, const std::string& context,
                                     const std::string& continuation) {
    if (continuation.empty()) throw ParameterError("continuation must be non-empty");
    json messages = json::array({json{{"role", "user"}, {"content", context}},
                                 json{{"role", "assistant"}, {"content", continuation}}});
    json req{{"model", model_ref}, {"messages", messages}, {"logprobs", true}, {"max_tokens", 1}};

    json res = json::parse(post_chat(req.dump(), "score", model_ref), nullptr, false);
    if (res.is_discarded()) throw ProtocolError("response is not valid JSON");
    if (!res.contains("choices") || res["choices"].empty() ||
        !res["choices"][0].contains("logprobs") || res["choices"][0]["logprobs"].is_null())
        throw CapabilityError("backend does not report log-probabilities");
    const json& lp = res["choices"][0]["logprobs"];
    if (!lp.contains("content") || !lp["content"].is_array())
        throw CapabilityError("backend log-probability payload lacks token content");
    double total = 0.0;
    std::size_t tokens = 0;
    for (const auto& tok : lp["content"]) {
        if (!tok.contains("logprob") || !tok["logprob"].is_number())
            throw ProtocolError("token record missing logprob");
        total += tok["logprob"].get<double>();
        ++tokens;
    }
    if (!std::isfinite(total) || total > 0.0)
        throw ProtocolError("backend reported invalid total log-probability");
    if (options_.normalize_logprobs && tokens > 0) total /= static_cast<double>(tokens);
    return {continuation, total};
}

}  // namespace cqr
