#pragma once

#include <cstdint>
#include <string>

namespace unmask {

// Exit codes shared by every subcommand: 0 success, 2 usage or precondition
// failure, 3 numerical failure during training.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

struct GenDataArgs {
  std::string out;
  int num = 0;
  int classes = 0;
  int size = 0;
  uint64_t seed = 0;
  int val = -1;  // negative means num / 5
  std::string prior_pool_out;
  int pool_per_class = 200;
  bool force = false;
};

struct PretrainArgs {
  std::string data;
  std::string config;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string config;
  std::string prior;  // none | boxes | pool:DIR
  std::string classifier;
  std::string out;
};

struct EditArgs {
  std::string model;
  std::string input;
  std::string class_name;
  std::string out;
  std::string dump_mask;
  std::string classifier;
  bool soft = false;
};

struct EvalArgs {
  std::string model;
  std::string data;
  std::string classifier;
  std::string report;
};

int cmd_gen_data(const GenDataArgs& args);
int cmd_pretrain(const PretrainArgs& args);
int cmd_train(const TrainArgs& args);
int cmd_edit(const EditArgs& args);
int cmd_eval(const EvalArgs& args);

}  // namespace unmask
