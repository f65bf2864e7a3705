#pragma once

#include <string>

#include "unmask/nets.hpp"
#include "unmask/train.hpp"

namespace unmask {

// Resolved run configuration. The source format is flat UTF-8 text, one
// `key = value` per line with `#` comments; unknown and duplicate keys are
// rejected. The raw text travels verbatim into every artifact a run writes,
// so a run can always be re-created from any of its outputs.
//
// The prior kind and pool directory are command-line choices (`--prior`),
// and normalization statistics come from the dataset manifest; neither is a
// config key.
struct RunConfig {
  NetConfig net;
  TrainConfig train;
  float eval_boundary = 0.5f;
  double mask_threshold = 0.5;
  std::string raw;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Every key with its default value and a comment; parses back to a
// default-constructed RunConfig.
std::string default_run_config();

}  // namespace unmask
