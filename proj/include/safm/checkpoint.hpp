#pragma once

#include <string>

#include "safm/adapter.hpp"
#include "safm/backbone.hpp"

namespace safm {

// Full trainable state after finishing a task: backbone weights, every live
// adapter, and the routes registered so far.
struct Checkpoint {
  ModelConfig config;
  BackboneParams backbone;
  AdapterStore store{0, 0};
  int tasks_done = 0;
};

std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace safm
