#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "siamese/errors.h"
#include "siamese/training.h"

namespace siamese {
namespace {

std::size_t split_point(std::size_t n, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(cut, 1, n - 1);
}

}  // namespace

Dataset make_modular_addition_dataset(int p, std::size_t n_examples, std::uint64_t seed,
                                      std::size_t vocab_size, double train_fraction) {
  if (p < 2) throw ConfigError("modulus p must be at least 2");
  if (static_cast<std::size_t>(p) + 1 > vocab_size) {
    throw ConfigError("modulus p=" + std::to_string(p) + " needs vocab_size >= " +
                      std::to_string(p + 1) + ", got " + std::to_string(vocab_size));
  }
  const int eq = p;
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(p) * static_cast<std::size_t>(p));
  for (int a = 0; a < p; ++a) {
    for (int b = 0; b < p; ++b) pairs.emplace_back(a, b);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  if (n_examples != 0 && n_examples < pairs.size()) pairs.resize(n_examples);
  if (pairs.size() < 2) throw ConfigError("modular addition needs at least 2 examples");

  Dataset data;
  data.vocab = static_cast<std::size_t>(p) + 1;
  data.seq_len = 3;
  const std::size_t cut = split_point(pairs.size(), train_fraction);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [a, b] = pairs[k];
    Example ex{{a, b, eq}, {kIgnoreTarget, kIgnoreTarget, (a + b) % p}};
    (k < cut ? data.train : data.eval).push_back(std::move(ex));
  }
  return data;
}

Dataset make_copy_dataset(std::size_t alphabet, std::size_t length, std::size_t n_examples,
                          std::uint64_t seed, std::size_t vocab_size, double train_fraction) {
  if (alphabet < 1 || length < 1) throw ConfigError("copy task needs alphabet, length >= 1");
  if (alphabet + 1 > vocab_size) {
    throw ConfigError("copy alphabet " + std::to_string(alphabet) + " needs vocab_size >= " +
                      std::to_string(alphabet + 1));
  }
  // Cap at the number of distinct strings.
  double distinct = std::pow(static_cast<double>(alphabet), static_cast<double>(length));
  const std::size_t n =
      distinct < static_cast<double>(n_examples) ? static_cast<std::size_t>(distinct) : n_examples;
  if (n < 2) throw ConfigError("copy task needs at least 2 distinct strings");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> symbol(0, static_cast<int>(alphabet) - 1);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> strings;
  while (strings.size() < n) {
    std::vector<int> s(length);
    for (int& t : s) t = symbol(rng);
    if (seen.insert(s).second) strings.push_back(std::move(s));
  }

  Dataset data;
  data.vocab = alphabet + 1;
  data.seq_len = 2 * length;
  const int sep = static_cast<int>(alphabet);
  const std::size_t cut = split_point(strings.size(), train_fraction);
  for (std::size_t k = 0; k < strings.size(); ++k) {
    const auto& s = strings[k];
    std::vector<int> full(s);
    full.push_back(sep);
    full.insert(full.end(), s.begin(), s.end());
    Example ex;
    ex.input.assign(full.begin(), full.end() - 1);
    ex.target.assign(full.size() - 1, kIgnoreTarget);
    for (std::size_t t = length; t + 1 < full.size(); ++t) ex.target[t] = full[t + 1];
    (k < cut ? data.train : data.eval).push_back(std::move(ex));
  }
  return data;
}

Dataset make_text_dataset(const std::string& path, std::size_t seq_len, std::size_t vocab_size,
                          double train_fraction) {
  if (vocab_size < 256) throw ConfigError("byte-level text needs vocab_size >= 256");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open text file '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  const std::size_t window = seq_len + 1;
  const std::size_t n = bytes.size() / window;
  if (n < 2) throw ConfigError("text file too short for two windows of " + std::to_string(window));

  Dataset data;
  data.vocab = 256;
  data.seq_len = seq_len;
  const std::size_t cut = split_point(n, train_fraction);
  for (std::size_t k = 0; k < n; ++k) {
    Example ex;
    for (std::size_t t = 0; t < seq_len; ++t) {
      ex.input.push_back(bytes[k * window + t]);
      ex.target.push_back(bytes[k * window + t + 1]);
    }
    (k < cut ? data.train : data.eval).push_back(std::move(ex));
  }
  return data;
}

Dataset make_dataset(const DatasetSpec& spec, const ModelConfig& model, std::uint64_t seed) {
  Dataset data = std::visit(
      [&](const auto& s) -> Dataset {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ModularAddSpec>) {
          return make_modular_addition_dataset(s.p, s.n_examples, seed, model.vocab_size,
                                               s.train_fraction);
        } else if constexpr (std::is_same_v<S, CopySpec>) {
          return make_copy_dataset(s.alphabet, s.length, s.n_examples, seed, model.vocab_size,
                                   s.train_fraction);
        } else {
          return make_text_dataset(s.path, model.seq_len, model.vocab_size, s.train_fraction);
        }
      },
      spec);
  if (data.seq_len > model.seq_len) {
    throw ConfigError("dataset sequences of length " + std::to_string(data.seq_len) +
                      " exceed model seq_len " + std::to_string(model.seq_len));
  }
  return data;
}

Batch make_batch(std::span<const Example> examples) {
  if (examples.empty()) throw ContractError("empty batch");
  Batch batch;
  batch.inputs.batch = examples.size();
  batch.inputs.time = examples.front().input.size();
  for (const auto& ex : examples) {
    if (ex.input.size() != batch.inputs.time || ex.target.size() != batch.inputs.time) {
      throw DimensionError("examples in a batch must share one length");
    }
    batch.inputs.ids.insert(batch.inputs.ids.end(), ex.input.begin(), ex.input.end());
    batch.targets.insert(batch.targets.end(), ex.target.begin(), ex.target.end());
  }
  return batch;
}

}  // namespace siamese
