#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace siamese {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token, target or coordinate out of range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid model, training or experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A softmax row with every entry masked out.
class MaskError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Non-finite value produced where a finite one was required.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what, std::size_t where = 0)
      : std::runtime_error(what), where_(where) {}

  std::size_t where() const noexcept { return where_; }

 private:
  std::size_t where_;
};

}  // namespace siamese
