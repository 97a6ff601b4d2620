#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mergeforge/benchrunner.hpp"

namespace mergeforge::endpoint {

struct EndpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NetworkError : EndpointError {
    using EndpointError::EndpointError;
};
struct HttpError : EndpointError {
    HttpError(int status_, const std::string& message)
        : EndpointError("HTTP " + std::to_string(status_) + ": " + message), status(status_) {}
    int status;
};
struct MalformedResponse : EndpointError {
    using EndpointError::EndpointError;
};

struct ChatMessage {
    std::string role;
    std::string content;
};

struct RetryPolicy {
    int max_attempts = 3;
    int initial_delay_ms = 250;
    int max_delay_ms = 4000;
};

// Minimal chat-completions client: POST {base_url}/v1/chat/completions with
// model/messages/temperature/max_tokens, reading choices[0].message.content.
// 429 and 5xx responses (and transport failures) are retried with bounded
// exponential backoff up to max_attempts.
class EndpointClient {
public:
    explicit EndpointClient(std::string base_url, RetryPolicy policy = {});

    std::string chat(const std::string& model, const std::vector<ChatMessage>& messages,
                     const benchrunner::GenerationConfig& cfg) const;

    const std::string& base_url() const { return base_url_; }

private:
    std::string base_url_;
    RetryPolicy policy_;
};

enum class PromptMode { Raw, Llama, Mistral, SmolLM };

// Builds the request messages for one question: Raw sends the scoring
// prompt as a user message (plus an optional system message); the template
// modes send the fully rendered template bytes as a single user message.
std::vector<ChatMessage> make_messages(const benchrunner::Question& q, PromptMode mode,
                                       const std::string& system);

// Queries every bank question with at most `max_in_flight` requests running
// concurrently. Entries land in bank order, so scheduling never affects the
// resulting transcript or its grading.
benchrunner::Transcript collect_transcript(const EndpointClient& client,
                                           const std::string& model,
                                           const std::vector<benchrunner::Question>& bank,
                                           PromptMode mode, const std::string& system,
                                           const benchrunner::GenerationConfig& cfg,
                                           unsigned max_in_flight = 4);

}  // namespace mergeforge::endpoint
