#include "rmsa/checkpoint.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace rmsa {

using nlohmann::json;

namespace {

json model_to_json(const ModelConfig& m) {
  return json{{"embed_dim", m.embed_dim},         {"num_layers", m.num_layers},
              {"num_heads", m.num_heads},         {"mlp_multiplier", m.mlp_multiplier},
              {"head_hidden", m.head_hidden},     {"k_spectral", m.k_spectral},
              {"num_paths", m.num_paths},         {"num_subbands", m.num_subbands},
              {"feature_width", m.feature_width}, {"wire_scale_min", m.wire_scale_min},
              {"wire_scale_max", m.wire_scale_max}, {"wire", m.wire}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.embed_dim = j.at("embed_dim").get<int>();
  m.num_layers = j.at("num_layers").get<int>();
  m.num_heads = j.at("num_heads").get<int>();
  m.mlp_multiplier = j.at("mlp_multiplier").get<int>();
  m.head_hidden = j.at("head_hidden").get<int>();
  m.k_spectral = j.at("k_spectral").get<int>();
  m.num_paths = j.at("num_paths").get<int>();
  m.num_subbands = j.at("num_subbands").get<int>();
  m.feature_width = j.at("feature_width").get<int>();
  m.wire_scale_min = j.at("wire_scale_min").get<double>();
  m.wire_scale_max = j.at("wire_scale_max").get<double>();
  m.wire = j.at("wire").get<bool>();
  m.validate();
  return m;
}

template <typename P>
json params_to_json(const P& p) {
  json out = json::object();
  visit_const(p, [&](const std::string& name, const MatrixX<float>& m) {
    std::vector<float> data(m.data(), m.data() + m.size());  // column-major
    out[name] = json{{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
  });
  return out;
}

template <typename P>
void params_from_json(P& p, const json& j) {
  visit(p, [&](const std::string& name, MatrixX<float>& m) {
    if (!j.contains(name)) throw ConfigError("checkpoint: missing parameter " + name);
    const auto& e = j.at(name);
    const auto rows = e.at("shape").at(0).get<Eigen::Index>();
    const auto cols = e.at("shape").at(1).get<Eigen::Index>();
    if (rows != m.rows() || cols != m.cols()) {
      throw ConfigError("checkpoint: shape mismatch for " + name + ": stored " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()));
    }
    const auto data = e.at("data").get<std::vector<float>>();
    if (static_cast<Eigen::Index>(data.size()) != m.size()) throw ConfigError("checkpoint: data size mismatch for " + name);
    m = Eigen::Map<const MatrixX<float>>(data.data(), rows, cols);
  });
}

json adam_to_json(const Adam<float>& a) {
  return json{{"t", a.t()},
              {"m", std::vector<float>(a.m().data(), a.m().data() + a.m().size())},
              {"v", std::vector<float>(a.v().data(), a.v().data() + a.v().size())}};
}

void adam_from_json(Adam<float>& a, const json& j, Eigen::Index expected) {
  const auto m = j.at("m").get<std::vector<float>>();
  const auto v = j.at("v").get<std::vector<float>>();
  if (static_cast<Eigen::Index>(m.size()) != expected || v.size() != m.size()) {
    throw ConfigError("checkpoint: optimizer state size mismatch");
  }
  a.restore(Eigen::Map<const VectorX<float>>(m.data(), expected), Eigen::Map<const VectorX<float>>(v.data(), expected),
            j.at("t").get<std::int64_t>());
}

}  // namespace

std::string checkpoint_to_string(const Checkpoint& c) {
  json j;
  j["format"] = "rmsa-checkpoint";
  j["format_version"] = kCheckpointVersion;
  j["tool_version"] = kVersion;
  j["config_hash"] = hex64(c.config_hash);
  j["model_hash"] = hex64(c.model.hash());
  j["model"] = model_to_json(c.model);
  j["step"] = c.state.step;
  j["update"] = c.state.update;
  j["actor"] = params_to_json(c.state.actor);
  j["critic"] = params_to_json(c.state.critic);
  j["optimizer"] = json{{"actor", adam_to_json(c.state.actor_opt)}, {"critic", adam_to_json(c.state.critic_opt)}};
  return j.dump();
}

Checkpoint checkpoint_from_string(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("checkpoint: malformed document: ") + e.what());
  }
  try {
    if (j.value("format", std::string()) != "rmsa-checkpoint") throw ConfigError("checkpoint: not a checkpoint document");
    if (j.at("format_version").get<int>() != kCheckpointVersion) {
      throw ConfigError("checkpoint: unsupported format version " + j.at("format_version").dump());
    }
    Checkpoint c;
    c.model = model_from_json(j.at("model"));
    c.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    Rng rng(0);
    c.state.actor = init_actor<float>(c.model, rng);
    c.state.critic = init_critic<float>(c.model, rng);
    params_from_json(c.state.actor, j.at("actor"));
    params_from_json(c.state.critic, j.at("critic"));
    c.state.step = j.at("step").get<std::int64_t>();
    c.state.update = j.at("update").get<std::int64_t>();
    if (j.contains("optimizer")) {
      adam_from_json(c.state.actor_opt, j.at("optimizer").at("actor"), parameter_count(c.state.actor));
      adam_from_json(c.state.critic_opt, j.at("optimizer").at("critic"), parameter_count(c.state.critic));
    }
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    out << checkpoint_to_string(ckpt);
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash, bool force) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Checkpoint c = checkpoint_from_string(ss.str());
  if (expected_hash && *expected_hash != c.config_hash && !force) {
    throw ConfigError("checkpoint " + path.string() + " was produced by config " + hex64(c.config_hash) +
                      ", current config is " + hex64(*expected_hash) + " (pass --force to override)");
  }
  return c;
}

}  // namespace rmsa
