#pragma once

// HTTP transport for the decomposition protocol: POST one JSON request
// {"query_id","text","instruction_template_id"}, expect a 200 response
// with {"attribute","action"}. Kept out of dsth.hpp so only callers that
// want a network client pull in the socket dependency.

#include <optional>
#include <string>
#include <utility>

#include "httplib.h"
#include "json.hpp"
#include "stvg/dsth.hpp"

namespace stvg::dsth {

class HttpDecompositionClient final : public DecompositionClient {
 public:
  HttpDecompositionClient(std::string host, int port, std::string path = "/decompose",
                          std::string instruction_template_id = "stvg_decompose_v1")
      : host_(std::move(host)),
        port_(port),
        path_(std::move(path)),
        template_id_(std::move(instruction_template_id)) {}

  std::optional<std::pair<std::string, std::string>> decompose(
      const std::string& query_id, const std::string& text) override {
    try {
      httplib::Client client(host_, port_);
      client.set_connection_timeout(5);
      client.set_read_timeout(30);
      nlohmann::json req{{"query_id", query_id},
                         {"text", text},
                         {"instruction_template_id", template_id_}};
      const auto res = client.Post(path_, req.dump(), "application/json");
      if (!res || res->status != 200) return std::nullopt;
      const auto j = nlohmann::json::parse(res->body);
      std::string attribute = j.at("attribute").get<std::string>();
      std::string action = j.at("action").get<std::string>();
      if (attribute.empty() || action.empty()) return std::nullopt;
      return std::make_pair(std::move(attribute), std::move(action));
    } catch (...) {
      return std::nullopt;  // fall back to the rule-based split
    }
  }

 private:
  std::string host_;
  int port_;
  std::string path_;
  std::string template_id_;
};

}  // namespace stvg::dsth
