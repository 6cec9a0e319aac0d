#include "reinseg/params.hpp"

#include <set>
#include <sstream>

namespace reinseg {

std::string digest_hex(std::uint64_t v) {
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = hex[v & 0xf];
    v >>= 4;
  }
  return out;
}

Param& ParamStore::add(const std::string& name, int rows, int cols, const std::string& group,
                       bool trainable, bool decay) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->group = group;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  p->trainable = trainable;
  p->decay = decay;
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) > 0; }

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->count();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

void ParamStore::set_trainable(bool trainable) {
  for (auto& p : params_) p->trainable = trainable;
}

std::uint64_t ParamStore::digest() const {
  Digest d;
  for (const auto& p : params_) {
    d.update(p->name);
    auto rows = static_cast<std::int64_t>(p->value.rows());
    auto cols = static_cast<std::int64_t>(p->value.cols());
    d.update_value(rows);
    d.update_value(cols);
    d.update(p->value.data(), sizeof(Scalar) * p->count());
  }
  return d.value();
}

std::size_t ParamGroup::scalar_count() const {
  std::size_t n = 0;
  for (const auto* p : params) n += p->count();
  return n;
}

std::uint64_t ParamGroup::digest() const {
  Digest d;
  for (const auto* p : params) {
    d.update(p->name);
    d.update(p->value.data(), sizeof(Scalar) * p->count());
  }
  return d.value();
}

void check_partition(const std::vector<ParamGroup>& groups, std::size_t expected_total) {
  std::set<const Param*> seen;
  std::size_t total = 0;
  for (const auto& g : groups) {
    for (const auto* p : g.params) {
      if (!seen.insert(p).second) {
        throw ConfigError("parameter in more than one group: " + p->name);
      }
      total += p->count();
    }
  }
  if (total != expected_total) {
    std::ostringstream os;
    os << "parameter groups do not partition the model: covered " << total << " of "
       << expected_total << " scalars";
    throw ConfigError(os.str());
  }
}

}  // namespace reinseg
