#ifndef SESA_SEMANTICS_HPP
#define SESA_SEMANTICS_HPP

// Behavior-semantics extraction pipeline: caption an image with a remote
// vision model, extract a five-field JSON record with a few-shot prompted
// extractor, and compose the fields into a final prompt. A `mock:` URL scheme
// routes requests to a deterministic on-disk fixture table.

#include "sesa/common.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace sesa {

struct SemanticsRecord {
    std::string key_entities;
    std::string pose;
    std::string action;
    std::string hand_action;
    std::string env;
};

struct PromptComposition {
    std::string final_text;
    SemanticsRecord source;
    std::string separator = ". ";
};

enum class EndpointRole { Captioner, Extractor };

struct ModelEndpoint {
    std::string base_url;  // "http://host:port" or "mock:/path/to/fixtures.json"
    std::string model = "default";
    double timeout_seconds = 30.0;
    int retries = 2;  // additional attempts after the first
    EndpointRole role = EndpointRole::Captioner;

    void validate() const {
        if (retries < 0) throw InvalidRange("endpoint retries must be >= 0");
        if (timeout_seconds <= 0.0) throw InvalidRange("endpoint timeout must be > 0");
    }
    bool is_mock() const { return base_url.rfind("mock:", 0) == 0; }
    std::string mock_path() const { return base_url.substr(5); }
};

struct ChatMessage {
    std::string role;
    std::string content;
};

struct RequestLogEntry {
    std::string url;
    std::string model;
    std::string hash;   // canonical request hash (fixture key)
    int attempt = 0;    // 1-based
    int status = 0;     // HTTP status, 0 for transport failure
    bool authorized = false;
};

namespace detail {

inline std::string base64_encode(const std::string& in) {
    static const char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    for (size_t i = 0; i < in.size(); i += 3) {
        uint32_t v = static_cast<unsigned char>(in[i]) << 16;
        if (i + 1 < in.size()) v |= static_cast<unsigned char>(in[i + 1]) << 8;
        if (i + 2 < in.size()) v |= static_cast<unsigned char>(in[i + 2]);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < in.size() ? tbl[v & 63] : '=');
    }
    return out;
}

inline std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

}  // namespace detail

inline nlohmann::json request_body(const ModelEndpoint& ep, const std::vector<ChatMessage>& msgs) {
    nlohmann::json body;
    body["model"] = ep.model;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : msgs) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    return body;
}

// canonical request hash: fnv1a of the key-sorted JSON body (fixture key)
inline std::string request_hash(const nlohmann::json& body) {
    return detail::hex64(fnv1a(body.dump()));
}

// Chat-completion client with retry/timeout accounting and a request log.
// Mock endpoints read a JSON fixture file mapping request hashes to either a
// plain content string or {"status": N, "content": "..."}.
struct Client {
    std::vector<RequestLogEntry> log;
    std::mutex log_mutex;

    std::string chat(const ModelEndpoint& ep, const std::vector<ChatMessage>& msgs) {
        ep.validate();
        nlohmann::json body = request_body(ep, msgs);
        std::string hash = request_hash(body);
        const char* key = std::getenv("SESA_ENDPOINT_KEY");

        std::string last_error;
        int last_status = 0;
        bool timed_out = false;
        const int attempts = ep.retries + 1;
        for (int attempt = 1; attempt <= attempts; attempt++) {
            RequestLogEntry entry{ep.base_url, ep.model, hash, attempt, 0, key != nullptr};
            std::string content;
            bool ok = ep.is_mock() ? mock_round_trip(ep, hash, entry, content, last_error)
                                   : http_round_trip(ep, body, key, entry, content, last_error,
                                                     timed_out);
            {
                std::lock_guard<std::mutex> lk(log_mutex);
                log.push_back(entry);
            }
            last_status = entry.status;
            if (ok) {
                if (content.empty())
                    throw EmptyResponse(ep.base_url + " returned empty content (attempt " +
                                        std::to_string(attempt) + ")");
                return content;
            }
        }
        std::string detail = ep.base_url + ": " + last_error + " (after " +
                             std::to_string(attempts) + " attempts)";
        if (timed_out) throw TimeoutError(detail);
        throw NetworkError(detail, last_status);
    }

private:
    bool mock_round_trip(const ModelEndpoint& ep, const std::string& hash, RequestLogEntry& entry,
                         std::string& content, std::string& last_error) {
        std::ifstream f(ep.mock_path());
        if (!f) {
            last_error = "cannot open fixture file '" + ep.mock_path() + "'";
            return false;
        }
        nlohmann::json fixtures;
        try {
            f >> fixtures;
        } catch (const nlohmann::json::exception& e) {
            last_error = std::string("fixture file unreadable: ") + e.what();
            return false;
        }
        if (!fixtures.contains(hash)) {
            entry.status = 404;
            last_error = "no fixture for request hash " + hash;
            return false;
        }
        const nlohmann::json& fx = fixtures.at(hash);
        if (fx.is_string()) {
            entry.status = 200;
            content = fx.get<std::string>();
            return true;
        }
        entry.status = fx.value("status", 200);
        if (entry.status != 200) {
            last_error = "fixture status " + std::to_string(entry.status);
            return false;
        }
        content = fx.value("content", "");
        return true;
    }

    bool http_round_trip(const ModelEndpoint& ep, const nlohmann::json& body, const char* key,
                         RequestLogEntry& entry, std::string& content, std::string& last_error,
                         bool& timed_out);
};

inline std::vector<ChatMessage> build_caption_messages(const std::string& image_b64) {
    return {{"system", "You describe images in detail, including people's hands."},
            {"user", "Describe this image.\n[image/base64] " + image_b64}};
}

inline std::vector<ChatMessage> build_extract_messages(const std::string& caption,
                                                       const std::string& few_shot_input,
                                                       const std::string& few_shot_output) {
    std::string instruction =
        "Extract behavior semantics from the caption. Respond with a JSON object with exactly "
        "these keys: key_entities, pose, action, hand_action, env.";
    return {{"system", instruction},
            {"user", few_shot_input},
            {"assistant", few_shot_output},
            {"user", caption}};
}

inline std::string caption(const std::string& image_path, const ModelEndpoint& ep, Client& client) {
    if (ep.role != EndpointRole::Captioner)
        throw InvalidRange("caption requires a captioner endpoint");
    std::ifstream f(image_path, std::ios::binary);
    if (!f) throw IoError("cannot open image '" + image_path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return client.chat(ep, build_caption_messages(detail::base64_encode(bytes)));
}

struct FewShotExample {
    std::string input;
    std::string output;
};

namespace detail {

inline const std::vector<std::string>& record_keys() {
    static const std::vector<std::string> keys{"key_entities", "pose", "action", "hand_action",
                                               "env"};
    return keys;
}

inline SemanticsRecord parse_record(const std::string& text, size_t length_cap) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedJson(e.what());
    }
    if (!j.is_object()) throw MalformedJson("extractor response is not a JSON object");
    for (const auto& k : record_keys())
        if (!j.contains(k)) throw MissingField(k);
    if (j.size() != record_keys().size())
        throw MalformedJson("extractor response has extra keys");
    SemanticsRecord r;
    auto get = [&](const std::string& k) {
        if (!j.at(k).is_string()) throw MalformedJson("field '" + k + "' is not a string");
        std::string v = j.at(k).get<std::string>();
        if (v.size() > length_cap)
            throw InvalidRange("field '" + k + "' exceeds length cap " +
                               std::to_string(length_cap));
        return v;
    };
    r.key_entities = get("key_entities");
    r.pose = get("pose");
    r.action = get("action");
    r.hand_action = get("hand_action");
    r.env = get("env");
    if (r.hand_action.empty()) throw MissingField("hand_action");
    return r;
}

}  // namespace detail

// one repair re-prompt on parse failure, then fail with the original error
inline SemanticsRecord extract(const std::string& caption_text, const FewShotExample& few_shot,
                               const ModelEndpoint& ep, Client& client, int* repair_count = nullptr,
                               size_t length_cap = 512) {
    if (ep.role != EndpointRole::Extractor)
        throw InvalidRange("extract requires an extractor endpoint");
    std::vector<ChatMessage> msgs =
        build_extract_messages(caption_text, few_shot.input, few_shot.output);
    std::string response = client.chat(ep, msgs);
    if (repair_count) *repair_count = 0;
    try {
        return detail::parse_record(response, length_cap);
    } catch (const MalformedJson& e) {
        msgs.push_back({"assistant", response});
        msgs.push_back({"user", std::string("Your reply failed to parse: ") + e.what() +
                                    ". Respond again with only the JSON object."});
        std::string repaired = client.chat(ep, msgs);
        if (repair_count) *repair_count = 1;
        return detail::parse_record(repaired, length_cap);
    }
}

// collapse whitespace runs to single spaces and trim
inline std::string normalize_whitespace(const std::string& s) {
    std::string out;
    bool in_space = true;  // trims leading space
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            in_space = true;
        } else {
            if (in_space && !out.empty()) out.push_back(' ');
            in_space = false;
            out.push_back(c);
        }
    }
    return out;
}

// P_f = pose + action + hand_action + env joined with ". "; a field already
// ending in '.' is joined with a bare space (no doubled period); key_entities
// is kept in the record but excluded from the final text
inline PromptComposition compose(const SemanticsRecord& record) {
    PromptComposition pc;
    pc.source = record;
    std::vector<std::string> parts{record.pose, record.action, record.hand_action, record.env};
    for (const auto& raw : parts) {
        std::string part = normalize_whitespace(raw);
        if (part.empty()) continue;
        if (!pc.final_text.empty())
            pc.final_text += (pc.final_text.back() == '.') ? " " : pc.separator;
        pc.final_text += part;
    }
    return pc;
}

struct DatasetEntry {
    std::string image;
    std::string status;  // "ok" or "error"
    std::string caption;
    SemanticsRecord semantics;
    std::string final_prompt;
    std::string error;
};

inline nlohmann::json entry_json(const DatasetEntry& e) {
    nlohmann::json j;
    j["image"] = e.image;
    j["status"] = e.status;
    if (e.status == "ok") {
        j["caption"] = e.caption;
        j["semantics"] = {{"key_entities", e.semantics.key_entities},
                          {"pose", e.semantics.pose},
                          {"action", e.semantics.action},
                          {"hand_action", e.semantics.hand_action},
                          {"env", e.semantics.env}};
        j["final_prompt"] = e.final_prompt;
    } else {
        j["error"] = e.error;
    }
    return j;
}

// JSON-lines manifest, one line per image in input order; per-image failures
// are recorded and the run continues
inline std::vector<DatasetEntry> build_dataset(const std::vector<std::string>& images,
                                               const ModelEndpoint& captioner,
                                               const ModelEndpoint& extractor,
                                               const FewShotExample& few_shot,
                                               const std::string& out_path, Client& client,
                                               int parallelism = 1) {
    if (parallelism < 1) throw InvalidRange("semantics parallelism must be >= 1");
    std::vector<DatasetEntry> entries(images.size());
    auto work = [&](size_t i) {
        DatasetEntry& e = entries[i];
        e.image = images[i];
        try {
            e.caption = caption(images[i], captioner, client);
            e.semantics = extract(e.caption, few_shot, extractor, client);
            e.final_prompt = compose(e.semantics).final_text;
            e.status = "ok";
        } catch (const Error& err) {
            e.status = "error";
            e.error = err.what();
        }
    };
    if (parallelism == 1) {
        for (size_t i = 0; i < images.size(); i++) work(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < parallelism; w++)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < images.size(); i = next.fetch_add(1))
                    work(i);
            });
        for (auto& t : pool) t.join();
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open manifest '" + out_path + "' for writing");
    for (const auto& e : entries) out << entry_json(e).dump() << "\n";
    if (!out) throw IoError("write failed for manifest '" + out_path + "'");
    return entries;
}

}  // namespace sesa

// The real-HTTP branch lives out of line so the header stays light unless a
// translation unit defines SESA_ENABLE_HTTP (httplib is header-only and slow
// to compile).
#ifdef SESA_ENABLE_HTTP
#include <httplib.h>

namespace sesa {

inline bool Client::http_round_trip(const ModelEndpoint& ep, const nlohmann::json& body,
                                    const char* key, RequestLogEntry& entry, std::string& content,
                                    std::string& last_error, bool& timed_out) {
    httplib::Client cli(ep.base_url);
    auto timeout_ms = static_cast<time_t>(ep.timeout_seconds * 1000.0);
    cli.set_connection_timeout(0, timeout_ms * 1000);
    cli.set_read_timeout(0, timeout_ms * 1000);
    httplib::Headers headers;
    if (key) headers.emplace("Authorization", std::string("Bearer ") + key);
    auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    if (!res) {
        timed_out = (res.error() == httplib::Error::ConnectionTimeout ||
                     res.error() == httplib::Error::Read);
        last_error = httplib::to_string(res.error());
        return false;
    }
    entry.status = res->status;
    if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        return false;
    }
    try {
        nlohmann::json j = nlohmann::json::parse(res->body);
        content = j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        last_error = std::string("bad response envelope: ") + e.what();
        return false;
    }
    return true;
}

}  // namespace sesa
#else
namespace sesa {

inline bool Client::http_round_trip(const ModelEndpoint& ep, const nlohmann::json&, const char*,
                                    RequestLogEntry&, std::string&, std::string& last_error,
                                    bool&) {
    last_error = "HTTP support not compiled in (define SESA_ENABLE_HTTP); endpoint " + ep.base_url;
    return false;
}

}  // namespace sesa
#endif  // SESA_ENABLE_HTTP

#endif  // SESA_SEMANTICS_HPP
