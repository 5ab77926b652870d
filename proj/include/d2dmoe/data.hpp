#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "d2dmoe/model.hpp"

namespace d2dmoe {

enum class Task { byte_lm, toy_classify };
std::string to_string(Task t);
Task parse_task(const std::string& s);

enum class Split { train, val };

struct DatasetSpec {
  Task task = Task::byte_lm;
  int vocab_size = 64;
  int seq_len = 32;  // tokens fed to the model per sequence
  int num_classes = 6;
  std::size_t train_size = 2048;  // sequences
  std::size_t val_size = 256;
  std::uint64_t seed = 0;

  void validate() const;
};
Json to_json(const DatasetSpec& s);
DatasetSpec dataset_spec_from_json(const Json& j);

// byte_lm sequences hold seq_len + 1 symbols (inputs plus shifted targets);
// toy_classify sequences hold seq_len symbols and carry a label.
struct Dataset {
  Task task = Task::byte_lm;
  int vocab_size = 0;
  int seq_len = 0;
  int num_classes = 0;
  std::vector<std::vector<int>> train;
  std::vector<std::vector<int>> val;
  std::vector<int> train_labels;
  std::vector<int> val_labels;

  const std::vector<std::vector<int>>& sequences(Split s) const { return s == Split::train ? train : val; }
  std::size_t size(Split s) const { return sequences(s).size(); }
  std::uint64_t hash() const;
  // Throws InputError when empty or inconsistent.
  void validate() const;
  // True when the model's vocabulary, context and head can consume this data.
  void check_compatible(const TransformerConfig& c) const;
};

Dataset generate_dataset(const DatasetSpec& spec);

// Planted keyword rule: symbols 0..num_classes-1 are keywords; the label is the
// most frequent keyword, ties to the lowest index; no keyword gives label 0.
int keyword_label(std::span<const int> seq, int num_classes);

Json to_json(const Dataset& d);
Dataset dataset_from_json(const Json& j);
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

TokenBatch make_batch(const Dataset& d, Split split, std::span<const std::size_t> indices);

// Deterministic shuffled epochs over [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  std::int64_t epoch() const { return epoch_; }

 private:
  void reshuffle();
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::int64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

// Consecutive index batches covering a split once (the last may be short).
std::vector<std::vector<std::size_t>> eval_batches(std::size_t n, std::size_t batch_size, std::size_t limit = 0);

}  // namespace d2dmoe
