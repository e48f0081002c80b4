#include <regex>

#include "httplib.h"
#include "icdit/annotate.hpp"
#include "icdit/container.hpp"
#include "icdit/errors.hpp"
#include "json.hpp"

namespace icdit {

using nlohmann::ordered_json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

ordered_json steps_json(const ReasoningChain& chain) {
  ordered_json steps = ordered_json::array();
  for (const auto& s : chain.steps) steps.push_back(ordered_json::array({s.statement, s.features}));
  return steps;
}

std::string request_body(const char* role, const Tensor& patch, ordered_json context, const std::string& prompt) {
  ordered_json j;
  j["role"] = role;
  j["patch"] = base64_encode(encode_container({{"patch", patch}}, DType::f64));
  j["context"] = std::move(context);
  j["prompt"] = prompt;
  return j.dump();
}

ordered_json parse_reply(const std::string& patch_id, const std::string& body) {
  try {
    auto j = ordered_json::parse(body);
    if (!j.is_object()) throw AgentError(patch_id, "reply is not a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw AgentError(patch_id, std::string("malformed reply: ") + e.what());
  }
}

}  // namespace

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                       static_cast<unsigned char>(bytes[i + 2]);
    for (int s = 18; s >= 0; s -= 6) out.push_back(kAlphabet[(v >> s) & 63]);
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(rest == 2 ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw IoError("base64: length is not a multiple of 4");
  std::string out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    unsigned v = 0;
    int pad = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int d = value(c);
      if (d < 0 || pad > 0) throw IoError("base64: invalid character");
      v = (v << 6) | static_cast<unsigned>(d);
    }
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<char>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

RemoteAgent::RemoteAgent(AgentEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint_.url, m, kUrl)) throw ConfigError("remote agent: invalid URL '" + endpoint_.url + "'");
  base_ = m[1];
  path_ = m[2].matched ? std::string(m[2]) : "/";
  if (endpoint_.timeout_ms <= 0 || endpoint_.max_retries < 0) throw ConfigError("remote agent: invalid timeout/retries");
}

std::string RemoteAgent::post(const std::string& patch_id, const std::string& body) const {
  httplib::Client client(base_);
  const auto sec = endpoint_.timeout_ms / 1000, usec = (endpoint_.timeout_ms % 1000) * 1000;
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status < 200 || res->status >= 300) throw AgentError(patch_id, "HTTP " + std::to_string(res->status));
    return res->body;
  }
  throw AgentError(patch_id, last_error + " after " + std::to_string(endpoint_.max_retries + 1) + " attempts");
}

ReasoningChain RemoteAgent::step(const Tensor& patch, const std::string& patch_id) const {
  const auto reply = parse_reply(
      patch_id, post(patch_id, request_body("step", patch, ordered_json::object(),
                                            "Describe the patch as ordered diagnostic measurements.")));
  ReasoningChain chain;
  chain.patch_id = patch_id;
  try {
    for (const auto& s : reply.at("steps")) {
      if (s.is_array() && s.size() == 2)
        chain.steps.push_back({s[0].get<std::string>(), s[1].get<std::vector<double>>()});
      else
        chain.steps.push_back({s.at("statement").get<std::string>(), s.at("features").get<std::vector<double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw AgentError(patch_id, std::string("malformed steps: ") + e.what());
  }
  if (chain.steps.empty()) throw AgentError(patch_id, "reply contains no steps");
  return chain;
}

std::string RemoteAgent::describe(const Tensor& patch, const std::string& patch_id, std::size_t label,
                                  const ReasoningChain& chain) const {
  ordered_json ctx;
  ctx["label"] = density_word(label);
  ctx["steps"] = steps_json(chain);
  const auto reply = parse_reply(
      patch_id, post(patch_id, request_body("describe", patch, std::move(ctx),
                                            "Write a one-line description consistent with the label.")));
  const auto it = reply.find("text");
  if (it == reply.end() || !it->is_string() || it->get<std::string>().empty())
    throw AgentError(patch_id, "reply has no text");
  return it->get<std::string>();
}

double RemoteAgent::judge(const Tensor& patch, const std::string& patch_id, const ReasoningChain& chain,
                          std::size_t label, std::string_view description) const {
  ordered_json ctx;
  ctx["label"] = density_word(label);
  ctx["steps"] = steps_json(chain);
  ctx["description"] = std::string(description);
  const auto reply = parse_reply(
      patch_id, post(patch_id, request_body("judge", patch, std::move(ctx),
                                            "Score grounding, label consistency and coverage in [0, 1].")));
  const auto it = reply.find("score");
  if (it == reply.end() || !it->is_number()) throw AgentError(patch_id, "reply has no numeric score");
  const double s = it->get<double>();
  if (!std::isfinite(s)) throw AgentError(patch_id, "score is not finite");
  return std::clamp(s, 0.0, 1.0);
}

}  // namespace icdit
