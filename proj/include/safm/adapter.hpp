#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "safm/rng.hpp"
#include "safm/tensor.hpp"

namespace safm {

// Identity of a shared bottleneck adapter. EMPTY is represented as
// std::nullopt in routes, never as an AdapterId.
struct AdapterId {
  int value = -1;
  auto operator<=>(const AdapterId&) const = default;
};

using RouteEntry = std::optional<AdapterId>;  // nullopt == empty adapter

// Per-task, per-layer adapter assignment.
struct Route {
  int task = -1;
  std::vector<RouteEntry> entries;  // length == layer count

  int num_layers() const { return static_cast<int>(entries.size()); }
  bool shares_adapter_with(const Route& other) const;
};

// Houlsby-style bottleneck adapter: x + up(gelu(down(x))).
struct Adapter {
  TensorPtr w_down;  // [d, m]
  TensorPtr b_down;  // [m]
  TensorPtr w_up;    // [m, d]
  TensorPtr b_up;    // [d]
  int layer = 0;     // creation layer (1-based)
  int task = -1;     // creation task

  std::vector<TensorPtr> parameters() const { return {w_down, b_down, w_up, b_up}; }
  static long long param_count(int width, int bottleneck) {
    return 2LL * width * bottleneck + bottleneck + width;
  }
};

// Owns all adapters and the registry of task routes in arrival order.
class AdapterStore {
 public:
  AdapterStore(int width, int bottleneck) : width_(width), bottleneck_(bottleneck) {}

  // Fresh adapter with near-identity init: zero up-projection, small Gaussian
  // down-projection, so the residual path dominates at creation.
  AdapterId new_adapter(int layer, int task, Rng& rng);

  // EMPTY passes x through bit-identically.
  TensorPtr apply_adapter(const RouteEntry& id, const TensorPtr& x) const;

  const Adapter& get(AdapterId id) const;
  Adapter& get(AdapterId id);
  bool contains(AdapterId id) const { return adapters_.count(id.value) > 0; }
  void remove(AdapterId id);
  std::size_t num_adapters() const { return adapters_.size(); }

  void register_route(Route route);
  const std::vector<Route>& routes() const { return routes_; }
  const Route& route_for_task(int task) const;
  bool has_route(int task) const;

  // Distinct non-empty adapters used at `layer` by the given prior routes,
  // deduplicated in first-use order.
  static std::vector<AdapterId> unique_adapters_at_layer(int layer,
                                                         const std::vector<Route>& prior);
  std::vector<AdapterId> unique_adapters_at_layer(int layer) const {
    return unique_adapters_at_layer(layer, routes_);
  }

  // Sum over distinct adapters referenced by any of the given routes, each
  // counted once, plus `backbone_params` when the backbone is trainable.
  long long count_learnable_params(const std::vector<Route>& routes,
                                   long long backbone_params = 0) const;

  int width() const { return width_; }
  int bottleneck() const { return bottleneck_; }

  // Iteration in id order (stable across runs).
  const std::map<int, Adapter>& adapters() const { return adapters_; }

  // For checkpoint restore; next_id must exceed every present id so resumed
  // runs keep allocating the same ids a fresh run would.
  int next_id() const { return next_id_; }
  static AdapterStore restore(int width, int bottleneck, int next_id,
                              std::map<int, Adapter> adapters, std::vector<Route> routes);

 private:
  int width_;
  int bottleneck_;
  int next_id_ = 0;
  std::map<int, Adapter> adapters_;
  std::vector<Route> routes_;
};

}  // namespace safm
