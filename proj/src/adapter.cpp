#include "safm/adapter.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace safm {

bool Route::shares_adapter_with(const Route& other) const {
  for (const auto& e : entries) {
    if (!e) continue;
    for (const auto& o : other.entries) {
      if (o && *o == *e) return true;
    }
  }
  return false;
}

AdapterId AdapterStore::new_adapter(int layer, int task, Rng& rng) {
  Adapter a;
  a.w_down = Tensor::create({width_, bottleneck_}, true);
  a.b_down = Tensor::create({bottleneck_}, true);
  a.w_up = Tensor::create({bottleneck_, width_}, true);
  a.b_up = Tensor::create({width_}, true);
  for (auto& v : a.w_down->values) v = rng.normal(0.0, 0.02);
  a.layer = layer;
  a.task = task;
  AdapterId id{next_id_++};
  adapters_.emplace(id.value, std::move(a));
  return id;
}

TensorPtr AdapterStore::apply_adapter(const RouteEntry& id, const TensorPtr& x) const {
  if (!id) return x;  // empty adapter: identity
  const Adapter& a = get(*id);
  auto mid = gelu(add_bias(matmul(x, a.w_down), a.b_down));
  return add(x, add_bias(matmul(mid, a.w_up), a.b_up));
}

const Adapter& AdapterStore::get(AdapterId id) const {
  auto it = adapters_.find(id.value);
  if (it == adapters_.end()) {
    throw std::out_of_range("AdapterStore: unknown adapter id " + std::to_string(id.value));
  }
  return it->second;
}

Adapter& AdapterStore::get(AdapterId id) {
  return const_cast<Adapter&>(static_cast<const AdapterStore*>(this)->get(id));
}

void AdapterStore::remove(AdapterId id) {
  if (adapters_.erase(id.value) == 0) {
    throw std::out_of_range("AdapterStore: removing unknown adapter id " +
                            std::to_string(id.value));
  }
}

void AdapterStore::register_route(Route route) {
  for (const auto& e : route.entries) {
    if (e && !contains(*e)) {
      throw std::out_of_range("AdapterStore: route references unknown adapter id " +
                              std::to_string(e->value));
    }
  }
  routes_.push_back(std::move(route));
}

const Route& AdapterStore::route_for_task(int task) const {
  for (const auto& r : routes_) {
    if (r.task == task) return r;
  }
  throw std::out_of_range("AdapterStore: no route registered for task " + std::to_string(task));
}

bool AdapterStore::has_route(int task) const {
  return std::any_of(routes_.begin(), routes_.end(),
                     [task](const Route& r) { return r.task == task; });
}

std::vector<AdapterId> AdapterStore::unique_adapters_at_layer(int layer,
                                                              const std::vector<Route>& prior) {
  std::vector<AdapterId> out;
  std::unordered_set<int> seen;
  for (const auto& r : prior) {
    if (layer - 1 < 0 || layer - 1 >= r.num_layers()) continue;
    const auto& e = r.entries[layer - 1];
    if (e && seen.insert(e->value).second) out.push_back(*e);
  }
  return out;
}

AdapterStore AdapterStore::restore(int width, int bottleneck, int next_id,
                                   std::map<int, Adapter> adapters, std::vector<Route> routes) {
  AdapterStore store(width, bottleneck);
  for (const auto& [id, a] : adapters) {
    if (id >= next_id) {
      throw std::invalid_argument("AdapterStore: adapter id " + std::to_string(id) +
                                  " not below next_id " + std::to_string(next_id));
    }
    (void)a;
  }
  store.next_id_ = next_id;
  store.adapters_ = std::move(adapters);
  for (auto& r : routes) store.register_route(std::move(r));
  return store;
}

long long AdapterStore::count_learnable_params(const std::vector<Route>& routes,
                                               long long backbone_params) const {
  std::unordered_set<int> distinct;
  for (const auto& r : routes) {
    for (const auto& e : r.entries) {
      if (e) distinct.insert(e->value);
    }
  }
  return backbone_params +
         static_cast<long long>(distinct.size()) * Adapter::param_count(width_, bottleneck_);
}

}  // namespace safm
