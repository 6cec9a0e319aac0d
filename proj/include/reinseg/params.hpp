#pragma once

#include "reinseg/digest.hpp"
#include "reinseg/types.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace reinseg {

/// One named parameter array. Gradients are accumulated here by the tape
/// during backward passes; the optimizer consumes and clears them.
struct Param {
  std::string name;
  std::string group;  // "backbone" | "rein" | "head"
  Mat value;
  Mat grad;
  bool trainable = true;
  bool decay = true;  // weight decay applies (matrix weights only)

  std::size_t count() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() { grad.setZero(); }
};

/// Ordered, name-indexed parameter container with stable addresses.
class ParamStore {
 public:
  Param& add(const std::string& name, int rows, int cols, const std::string& group,
             bool trainable = true, bool decay = true);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Param& at(std::size_t i) { return *params_[i]; }
  const Param& at(std::size_t i) const { return *params_[i]; }

  std::vector<Param*> all();
  std::size_t scalar_count() const;
  void zero_grads();
  void set_trainable(bool trainable);

  /// Order- and content-sensitive hash of every parameter's raw bytes.
  std::uint64_t digest() const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// A learning-rate group over parameters. Every model parameter belongs to
/// exactly one group; frozen groups receive no optimizer updates.
struct ParamGroup {
  std::string name;
  std::vector<Param*> params;
  bool trainable = true;
  double learning_rate = 0.0;

  std::size_t scalar_count() const;
  std::uint64_t digest() const;
};

/// Throws if any parameter appears in more than one group or has no group.
void check_partition(const std::vector<ParamGroup>& groups, std::size_t expected_total);

}  // namespace reinseg
