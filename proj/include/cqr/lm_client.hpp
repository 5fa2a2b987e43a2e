#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace cqr {

/// Sampling controls forwarded to the backend. `seed` distinguishes repeated
/// samples of the same prompt; backends without seed support ignore it.
struct GenerationParams {
    double temperature = 0.8;
    double top_p = 0.8;
    int max_tokens = 2560;
    std::optional<std::uint64_t> seed;

    void validate() const;
};

/// Completion text plus the summed per-token natural-log probability.
struct ScoredCompletion {
    std::string text;
    double total_logprob = 0.0;  // <= 0, finite
};

/// Outcome slot for one element of a batch call.
template <typename T>
struct BatchItem {
    std::optional<T> value;
    std::string error;

    bool ok() const { return value.has_value(); }
};

struct ScoreRequest {
    std::string context;
    std::string continuation;
};

/// Uniform access to a language model backend: free-text completion and
/// scored continuation. Batch variants run under a bounded in-flight count
/// and return results in input order; one failing element does not poison
/// the rest.
class LmClient {
public:
    virtual ~LmClient() = default;

    virtual std::string complete(const std::string& model_ref, const std::string& prompt,
                                 const GenerationParams& params) = 0;
    virtual ScoredCompletion score(const std::string& model_ref, const std::string& context,
                                   const std::string& continuation) = 0;

    std::vector<BatchItem<std::string>> batch_complete(const std::string& model_ref,
                                                       const std::vector<std::string>& prompts,
                                                       const GenerationParams& params,
                                                       unsigned max_in_flight = 4);
    std::vector<BatchItem<ScoredCompletion>> batch_score(const std::string& model_ref,
                                                         const std::vector<ScoreRequest>& requests,
                                                         unsigned max_in_flight = 4);
};

/// Offline backend: every output is a pure function of (seed, inputs), so
/// pipeline runs over it are bit-reproducible. Tests may pin exact responses
/// per prompt or install a hook that sees the full prompt.
class MockLmClient : public LmClient {
public:
    explicit MockLmClient(std::uint64_t seed = 0) : seed_(seed) {}

    std::string complete(const std::string& model_ref, const std::string& prompt,
                         const GenerationParams& params) override;
    ScoredCompletion score(const std::string& model_ref, const std::string& context,
                           const std::string& continuation) override;

    using Hook =
        std::function<std::optional<std::string>(const std::string&, const GenerationParams&)>;

    /// Pin the response for an exact prompt string (takes priority over the hook).
    void set_response(const std::string& prompt, const std::string& text);
    /// Custom responder; return nullopt to fall through to the seeded generator.
    void set_hook(Hook hook);

    std::size_t complete_calls() const { return complete_calls_.load(); }

private:
    std::uint64_t seed_;
    std::map<std::string, std::string> canned_;
    Hook hook_;
    std::atomic<std::size_t> complete_calls_{0};
};

/// Exponential backoff schedule: delay doubles per attempt from `base_delay`.
struct RetryPolicy {
    unsigned max_attempts = 4;
    std::chrono::milliseconds base_delay{250};

    std::chrono::milliseconds delay_before(unsigned attempt) const;  // attempt >= 1
};

/// Line-delimited request log shared by a run. Entries carry a sequence
/// number rather than wall time so log content is reproducible.
class RequestLog {
public:
    RequestLog(const std::filesystem::path& dest, std::string run_id);
    void record(const std::string& op, const std::string& model_ref, unsigned attempts,
                std::size_t prompt_chars, std::size_t output_chars, const std::string& status);

private:
    std::mutex mu_;
    std::filesystem::path dest_;
    std::string run_id_;
    std::uint64_t seq_ = 0;
};

/// OpenAI-compatible chat-completions backend. The credential is read from
/// `api_key_env` at construction; scoring requires the backend to return
/// token log-probabilities.
class HttpLmClient : public LmClient {
public:
    struct Options {
        std::string base_url = "http://127.0.0.1:8080";
        std::string api_key_env = "CQR_API_KEY";
        std::string chat_path = "/v1/chat/completions";
        RetryPolicy retry;
        std::chrono::seconds timeout{120};
        bool normalize_logprobs = false;  // divide the sum by the token count
    };

    explicit HttpLmClient(Options options);
    ~HttpLmClient() override;

    std::string complete(const std::string& model_ref, const std::string& prompt,
                         const GenerationParams& params) override;
    ScoredCompletion score(const std::string& model_ref, const std::string& context,
                           const std::string& continuation) override;

    void set_log(std::shared_ptr<RequestLog> log) { log_ = std::move(log); }
    /// Retries consumed by the most recent successful call on this thread.
    unsigned last_retries() const { return last_retries_.load(); }

private:
    std::string post_chat(const std::string& body, const std::string& op,
                          const std::string& model_ref);

    Options options_;
    std::string api_key_;
    std::shared_ptr<RequestLog> log_;
    std::atomic<unsigned> last_retries_{0};
};

}  // namespace cqr
