#include "d2dmoe/data.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/hash.hpp"

namespace d2dmoe {

std::string to_string(Task t) { return t == Task::byte_lm ? "byte_lm" : "toy_classify"; }

Task parse_task(const std::string& s) {
  if (s == "byte_lm") return Task::byte_lm;
  if (s == "toy_classify") return Task::toy_classify;
  throw ValidationError("unknown task '" + s + "' (expected byte_lm or toy_classify)");
}

void DatasetSpec::validate() const {
  std::vector<std::string> v;
  if (vocab_size < 16) v.push_back("vocab_size must be at least 16");
  if (seq_len < 2) v.push_back("seq_len must be at least 2");
  if (train_size == 0) v.push_back("train_size must be positive");
  if (val_size == 0) v.push_back("val_size must be positive");
  if (task == Task::toy_classify && (num_classes < 2 || num_classes >= vocab_size / 2)) {
    v.push_back("num_classes must be in [2, vocab_size/2)");
  }
  if (!v.empty()) {
    std::string msg = "invalid dataset spec:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }
}

Json to_json(const DatasetSpec& s) {
  return Json{{"task", to_string(s.task)},       {"vocab_size", s.vocab_size}, {"seq_len", s.seq_len},
              {"num_classes", s.num_classes},    {"train_size", s.train_size}, {"val_size", s.val_size},
              {"seed", s.seed}};
}

DatasetSpec dataset_spec_from_json(const Json& j) {
  DatasetSpec s;
  try {
    s.task = parse_task(j.value("task", std::string("byte_lm")));
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.seq_len = j.value("seq_len", s.seq_len);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.train_size = j.value("train_size", s.train_size);
    s.val_size = j.value("val_size", s.val_size);
    s.seed = j.value("seed", s.seed);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("dataset spec: ") + e.what());
  }
  return s;
}

std::uint64_t Dataset::hash() const {
  Fnv1a h;
  h.str(to_string(task)).value(vocab_size).value(seq_len).value(num_classes);
  for (const auto* split : {&train, &val}) {
    h.value(split->size());
    for (const auto& s : *split) h.value(s.size()).span(std::span<const int>(s));
  }
  h.span(std::span<const int>(train_labels)).span(std::span<const int>(val_labels));
  return h.digest();
}

void Dataset::validate() const {
  if (train.empty() || val.empty()) throw InputError("dataset has an empty split");
  const std::size_t len = static_cast<std::size_t>(seq_len) + (task == Task::byte_lm ? 1 : 0);
  for (const auto* split : {&train, &val}) {
    for (const auto& s : *split) {
      if (s.size() != len) throw InputError("dataset sequence of length " + std::to_string(s.size()) + ", expected " + std::to_string(len));
      for (int t : s) {
        if (t < 0 || t >= vocab_size) throw InputError("dataset token " + std::to_string(t) + " outside vocabulary");
      }
    }
  }
  if (task == Task::toy_classify) {
    if (train_labels.size() != train.size() || val_labels.size() != val.size()) throw InputError("label count mismatch");
    for (const auto* labels : {&train_labels, &val_labels}) {
      for (int l : *labels) {
        if (l < 0 || l >= num_classes) throw InputError("label " + std::to_string(l) + " out of range");
      }
    }
  }
}

void Dataset::check_compatible(const TransformerConfig& c) const {
  if (c.vocab_size < vocab_size) throw ValidationError("model vocabulary smaller than dataset vocabulary");
  if (c.context_length < seq_len) throw ValidationError("model context shorter than dataset sequences");
  const bool lm = task == Task::byte_lm;
  if (lm != (c.head == HeadKind::lm)) throw ValidationError("model head does not match task " + to_string(task));
  if (!lm && c.num_classes != num_classes) throw ValidationError("model class count differs from dataset");
}

namespace {

// Sparse first-order chain with planted motifs and a key-value recall pattern.
struct ChainModel {
  int vocab;
  std::vector<std::array<int, 4>> next;
  std::vector<std::vector<int>> motifs;  // motif[0] is its trigger
  int key;

  explicit ChainModel(int v, std::uint64_t seed) : vocab(v), next(static_cast<std::size_t>(v)), key(v - 1) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> sym(0, v - 2);
    for (auto& row : next) {
      for (int& s : row) s = sym(rng);
    }
    for (int m = 0; m < 8; ++m) {
      std::vector<int> motif{m * 3 % (v - 1)};
      for (int i = 0; i < 4; ++i) motif.push_back(sym(rng));
      motifs.push_back(motif);
    }
  }

  std::vector<int> sample(std::size_t len, std::mt19937_64& rng) const {
    static constexpr double kWeights[4] = {0.5, 0.25, 0.15, 0.10};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> sym(0, vocab - 2);
    std::vector<int> out;
    int cur = sym(rng);
    int stored = -1;
    out.push_back(cur);
    while (out.size() < len) {
      const double r = u(rng);
      if (r < 0.06) {
        out.push_back(key);
        if (stored < 0) stored = sym(rng);
        out.push_back(stored);
        cur = stored;
        continue;
      }
      if (r < 0.14) {
        cur = sym(rng);
        out.push_back(cur);
        continue;
      }
      const auto motif = std::find_if(motifs.begin(), motifs.end(), [&](const auto& m) { return m[0] == cur; });
      if (motif != motifs.end() && u(rng) < 0.9) {
        for (std::size_t i = 1; i < motif->size(); ++i) out.push_back((*motif)[i]);
        cur = motif->back();
        continue;
      }
      double acc = 0.0, pick = u(rng);
      int nxt = next[static_cast<std::size_t>(cur)][3];
      for (int i = 0; i < 4; ++i) {
        acc += kWeights[i];
        if (pick < acc) {
          nxt = next[static_cast<std::size_t>(cur)][static_cast<std::size_t>(i)];
          break;
        }
      }
      cur = nxt;
      out.push_back(cur);
    }
    out.resize(len);
    return out;
  }
};

std::vector<int> sample_keywords(int vocab, int seq_len, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::uniform_int_distribution<int> filler(classes, vocab - 1);
  const int top = cls(rng);
  const int max_count = std::max(2, seq_len / 6);
  const int top_count = std::uniform_int_distribution<int>(2, max_count)(rng);
  std::vector<int> seq;
  seq.insert(seq.end(), static_cast<std::size_t>(top_count), top);
  for (int c = 0; c < classes; ++c) {
    if (c == top) continue;
    const int k = std::uniform_int_distribution<int>(0, top_count)(rng);
    seq.insert(seq.end(), static_cast<std::size_t>(k), c);
  }
  if (seq.size() > static_cast<std::size_t>(seq_len)) seq.resize(static_cast<std::size_t>(seq_len));
  while (seq.size() < static_cast<std::size_t>(seq_len)) seq.push_back(filler(rng));
  std::shuffle(seq.begin(), seq.end(), rng);
  return seq;
}

}  // namespace

int keyword_label(std::span<const int> seq, int num_classes) {
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int t : seq) {
    if (t >= 0 && t < num_classes) ++counts[static_cast<std::size_t>(t)];
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.task = spec.task;
  d.vocab_size = spec.vocab_size;
  d.seq_len = spec.seq_len;
  d.num_classes = spec.task == Task::toy_classify ? spec.num_classes : 0;
  const ChainModel chain(spec.vocab_size, derive_seed(spec.seed, "chain"));
  std::mt19937_64 rng(derive_seed(spec.seed, "sequences"));
  std::set<std::uint64_t> seen;
  const std::size_t len = static_cast<std::size_t>(spec.seq_len) + (spec.task == Task::byte_lm ? 1 : 0);
  std::size_t attempts = 0;
  const std::size_t max_attempts = 20 * (spec.train_size + spec.val_size) + 1000;
  // A sequence goes to validation when its content hash says so; duplicates
  // are dropped so the splits never share a sequence.
  while (d.train.size() < spec.train_size || d.val.size() < spec.val_size) {
    if (++attempts > max_attempts) throw InputError("could not draw enough distinct sequences");
    std::vector<int> s = spec.task == Task::byte_lm ? chain.sample(len, rng)
                                                    : sample_keywords(spec.vocab_size, spec.seq_len, spec.num_classes, rng);
    const std::uint64_t h = Fnv1a().span(std::span<const int>(s)).digest();
    if (!seen.insert(h).second) continue;
    const bool to_val = mix64(h) % 8 == 0;
    auto& dst = to_val ? d.val : d.train;
    auto& labels = to_val ? d.val_labels : d.train_labels;
    if (dst.size() >= (to_val ? spec.val_size : spec.train_size)) continue;
    if (spec.task == Task::toy_classify) labels.push_back(keyword_label(s, spec.num_classes));
    dst.push_back(std::move(s));
  }
  d.validate();
  return d;
}

Json to_json(const Dataset& d) {
  return Json{{"task", to_string(d.task)},
              {"vocab_size", d.vocab_size},
              {"seq_len", d.seq_len},
              {"num_classes", d.num_classes},
              {"hash", d.hash()},
              {"train", d.train},
              {"val", d.val},
              {"train_labels", d.train_labels},
              {"val_labels", d.val_labels}};
}

Dataset dataset_from_json(const Json& j) {
  Dataset d;
  try {
    d.task = parse_task(j.at("task").get<std::string>());
    d.vocab_size = j.at("vocab_size").get<int>();
    d.seq_len = j.at("seq_len").get<int>();
    d.num_classes = j.at("num_classes").get<int>();
    d.train = j.at("train").get<std::vector<std::vector<int>>>();
    d.val = j.at("val").get<std::vector<std::vector<int>>>();
    d.train_labels = j.at("train_labels").get<std::vector<int>>();
    d.val_labels = j.at("val_labels").get<std::vector<int>>();
    if (j.at("hash").get<std::uint64_t>() != d.hash()) throw FormatError("dataset hash mismatch", 0);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed dataset file: ") + e.what(), 0);
  } catch (const ValidationError& e) {
    throw FormatError(std::string("malformed dataset file: ") + e.what(), 0);
  }
  d.validate();
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) { write_text_atomic(path, to_json(d).dump()); }

Dataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Json j;
  try {
    j = Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("dataset file is not JSON: ") + e.what(), e.byte);
  }
  return dataset_from_json(j);
}

TokenBatch make_batch(const Dataset& d, Split split, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("empty batch");
  const auto& seqs = d.sequences(split);
  TokenBatch b;
  b.batch = indices.size();
  b.seq = static_cast<std::size_t>(d.seq_len);
  b.ids.reserve(b.batch * b.seq);
  for (std::size_t i : indices) {
    if (i >= seqs.size()) throw InputError("batch index out of range");
    const auto& s = seqs[i];
    b.ids.insert(b.ids.end(), s.begin(), s.begin() + d.seq_len);
    if (d.task == Task::byte_lm) {
      b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
    } else {
      b.targets.push_back((split == Split::train ? d.train_labels : d.val_labels)[i]);
    }
  }
  return b;
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_(batch_size), seed_(seed) {
  if (n == 0 || batch_size == 0) throw InputError("sampler needs a non-empty split and batch size");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  std::mt19937_64 rng(mix64(seed_ + static_cast<std::uint64_t>(epoch_)));
  std::shuffle(order_.begin(), order_.end(), rng);
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < batch_) {
    if (pos_ == n_) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> eval_batches(std::size_t n, std::size_t batch_size, std::size_t limit) {
  if (batch_size == 0) throw InputError("batch size must be positive");
  if (limit > 0) n = std::min(n, limit);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    std::vector<std::size_t> b;
    for (std::size_t j = i; j < std::min(n, i + batch_size); ++j) b.push_back(j);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace d2dmoe
