#include "mergeforge/endpoint.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace mergeforge::endpoint {

namespace {

using nlohmann::ordered_json;

bool retryable_status(int status) { return status == 429 || (status >= 500 && status < 600); }

}  // namespace

EndpointClient::EndpointClient(std::string base_url, RetryPolicy policy)
    : base_url_(std::move(base_url)), policy_(policy) {
    while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
}

std::string EndpointClient::chat(const std::string& model,
                                 const std::vector<ChatMessage>& messages,
                                 const benchrunner::GenerationConfig& cfg) const {
    ordered_json body;
    body["model"] = model;
    body["messages"] = ordered_json::array();
    for (const auto& m : messages)
        body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    body["temperature"] = cfg.temperature;
    body["max_tokens"] = cfg.max_tokens;
    const std::string payload = body.dump();

    httplib::Client http(base_url_);
    http.set_connection_timeout(10, 0);
    http.set_read_timeout(120, 0);

    int delay_ms = policy_.initial_delay_ms;
    int last_status = 0;
    std::string last_error = "connection failed";
    for (int attempt = 1; attempt <= policy_.max_attempts; ++attempt) {
        auto res = http.Post("/v1/chat/completions", payload, "application/json");
        if (res) {
            if (res->status == 200) {
                const ordered_json j = ordered_json::parse(res->body, nullptr, false);
                if (j.is_discarded()) throw MalformedResponse("response body is not JSON");
                auto choices = j.find("choices");
                if (choices == j.end() || !choices->is_array() || choices->empty())
                    throw MalformedResponse("response has no choices");
                const auto& first = (*choices)[0];
                if (!first.is_object() || !first.contains("message") ||
                    !first["message"].is_object() || !first["message"].contains("content") ||
                    !first["message"]["content"].is_string())
                    throw MalformedResponse("response choice has no message content");
                return first["message"]["content"].get<std::string>();
            }
            last_status = res->status;
            if (!retryable_status(res->status)) throw HttpError(res->status, res->body);
        } else {
            last_status = 0;
            last_error = httplib::to_string(res.error());
        }
        if (attempt < policy_.max_attempts) {
            std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
            delay_ms = std::min(delay_ms * 2, policy_.max_delay_ms);
        }
    }
    if (last_status != 0)
        throw HttpError(last_status, "still failing after " +
                                         std::to_string(policy_.max_attempts) + " attempts");
    throw NetworkError(base_url_ + ": " + last_error);
}

std::vector<ChatMessage> make_messages(const benchrunner::Question& q, PromptMode mode,
                                       const std::string& system) {
    const std::string prompt = benchrunner::build_prompt(q);
    if (mode == PromptMode::Raw) {
        std::vector<ChatMessage> messages;
        if (!system.empty()) messages.push_back({"system", system});
        messages.push_back({"user", prompt});
        return messages;
    }
    const benchrunner::ChatFamily family = mode == PromptMode::Llama
                                               ? benchrunner::ChatFamily::Llama
                                           : mode == PromptMode::Mistral
                                               ? benchrunner::ChatFamily::Mistral
                                               : benchrunner::ChatFamily::SmolLM;
    return {{"user", benchrunner::render_chat(family, system, {prompt})}};
}

benchrunner::Transcript collect_transcript(const EndpointClient& client,
                                           const std::string& model,
                                           const std::vector<benchrunner::Question>& bank,
                                           PromptMode mode, const std::string& system,
                                           const benchrunner::GenerationConfig& cfg,
                                           unsigned max_in_flight) {
    benchrunner::Transcript tr;
    tr.model_id = model;
    if (bank.empty()) return tr;

    std::vector<std::string> responses(bank.size());
    std::vector<std::exception_ptr> errors(bank.size());
    std::atomic<std::size_t> next{0};

    unsigned workers = std::max(1u, max_in_flight);
    workers = unsigned(std::min<std::size_t>(workers, bank.size()));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < bank.size(); i = next.fetch_add(1)) {
                try {
                    responses[i] = client.chat(model, make_messages(bank[i], mode, system), cfg);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    for (std::size_t i = 0; i < bank.size(); ++i) tr.entries.emplace_back(bank[i].id, responses[i]);
    return tr;
}

}  // namespace mergeforge::endpoint
