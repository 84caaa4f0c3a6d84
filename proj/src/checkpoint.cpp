#include "safm/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace safm {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr int kVersion = 1;

json config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},       {"width", c.width},           {"heads", c.heads},
          {"max_seq", c.max_seq},     {"bottleneck", c.bottleneck}, {"base_vocab", c.base_vocab},
          {"max_tasks", c.max_tasks}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.bottleneck = j.at("bottleneck").get<int>();
  c.base_vocab = j.at("base_vocab").get<int>();
  c.max_tasks = j.at("max_tasks").get<int>();
  c.validate();
  return c;
}

json route_to_json(const Route& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    if (e) {
      entries.push_back(e->value);
    } else {
      entries.push_back(nullptr);
    }
  }
  return {{"task", r.task}, {"entries", entries}};
}

Route route_from_json(const json& j) {
  Route r;
  r.task = j.at("task").get<int>();
  for (const auto& e : j.at("entries")) {
    if (e.is_null()) {
      r.entries.push_back(std::nullopt);
    } else {
      r.entries.push_back(AdapterId{e.get<int>()});
    }
  }
  return r;
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  ordered_json j;
  j["version"] = kVersion;
  j["config"] = config_to_json(ckpt.config);
  j["tasks_done"] = ckpt.tasks_done;

  json backbone = json::array();
  for (const auto& p : ckpt.backbone.parameters()) backbone.push_back(p->values);
  j["backbone"] = std::move(backbone);

  json adapters = json::array();
  for (const auto& [id, a] : ckpt.store.adapters()) {
    adapters.push_back({{"id", id},
                        {"layer", a.layer},
                        {"task", a.task},
                        {"w_down", a.w_down->values},
                        {"b_down", a.b_down->values},
                        {"w_up", a.w_up->values},
                        {"b_up", a.b_up->values}});
  }
  j["adapters"] = std::move(adapters);
  j["next_id"] = ckpt.store.next_id();

  json routes = json::array();
  for (const auto& r : ckpt.store.routes()) routes.push_back(route_to_json(r));
  j["routes"] = std::move(routes);
  return j.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
  auto j = json::parse(text);
  if (j.at("version").get<int>() != kVersion) {
    throw std::invalid_argument("checkpoint: unsupported version " +
                                j.at("version").dump());
  }
  Checkpoint ckpt;
  ckpt.config = config_from_json(j.at("config"));
  ckpt.tasks_done = j.at("tasks_done").get<int>();

  Rng scratch(0);
  ckpt.backbone = BackboneParams::init(ckpt.config, scratch);
  auto params = ckpt.backbone.parameters();
  const auto& stored = j.at("backbone");
  if (stored.size() != params.size()) {
    throw std::invalid_argument("checkpoint: backbone has " + std::to_string(stored.size()) +
                                " tensors, expected " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto vals = stored[i].get<std::vector<double>>();
    if (vals.size() != params[i]->values.size()) {
      throw std::invalid_argument("checkpoint: backbone tensor " + std::to_string(i) +
                                  " size mismatch");
    }
    params[i]->values = std::move(vals);
  }

  std::map<int, Adapter> adapters;
  const int d = ckpt.config.width, m = ckpt.config.bottleneck;
  for (const auto& aj : j.at("adapters")) {
    Adapter a;
    a.layer = aj.at("layer").get<int>();
    a.task = aj.at("task").get<int>();
    a.w_down = Tensor::from({d, m}, aj.at("w_down").get<std::vector<double>>(), true);
    a.b_down = Tensor::from({m}, aj.at("b_down").get<std::vector<double>>(), true);
    a.w_up = Tensor::from({m, d}, aj.at("w_up").get<std::vector<double>>(), true);
    a.b_up = Tensor::from({d}, aj.at("b_up").get<std::vector<double>>(), true);
    adapters.emplace(aj.at("id").get<int>(), std::move(a));
  }
  std::vector<Route> routes;
  for (const auto& rj : j.at("routes")) routes.push_back(route_from_json(rj));
  ckpt.store = AdapterStore::restore(d, m, j.at("next_id").get<int>(), std::move(adapters),
                                     std::move(routes));
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out << checkpoint_to_json(ckpt) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace safm
