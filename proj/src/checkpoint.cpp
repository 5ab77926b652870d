#include "d2dmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace d2dmoe {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are stored in host order");

namespace {

constexpr std::uint64_t kAlign = 64;
constexpr std::uint64_t kPrefix = 16;
constexpr int kFormatVersion = 1;

std::uint64_t align_up(std::uint64_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

Json module_entry(const DenseModel& m, SiteId site) {
  Json j;
  j["form"] = m.form(site);
  const MoeLayer* moe = nullptr;
  if (site.kind == SiteKind::ffn) {
    moe = std::get_if<MoeLayer>(&m.layers[static_cast<std::size_t>(site.layer)].ffn);
  } else {
    const ProjectionSlot& slot = m.projection(site.layer, site.kind);
    moe = std::get_if<MoeLayer>(&slot);
    if (const auto* r = std::get_if<ReplacementMlp>(&slot)) j["source"] = r->provenance.str();
  }
  if (moe) {
    j["partition"] = to_json(moe->partition);
    j["policy"] = to_json(moe->policy);
    j["router_output"] = to_string(moe->router.output);
    j["activation"] = to_string(moe->act);
  } else {
    if (auto it = m.partitions.find(site); it != m.partitions.end()) j["partition"] = to_json(it->second);
    if (auto it = m.routers.find(site); it != m.routers.end()) j["router_output"] = to_string(it->second.output);
  }
  return j;
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

class TensorTable {
 public:
  TensorTable(std::span<const std::uint8_t> bytes, const Json& entries, std::uint64_t data_start)
      : bytes_(bytes), entries_(entries), data_start_(data_start) {
    if (!entries_.is_object()) throw FormatError("header field 'tensors' is not an object", kPrefix);
  }

  Tensor take(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("tensor '" + name + "' missing from header", kPrefix);
    used_.insert(name);
    const Json& e = *it;
    try {
      if (e.at("dtype").get<std::string>() != "f32") throw FormatError("tensor '" + name + "' has unsupported dtype", kPrefix);
      const auto shape = e.at("shape").get<ad::Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("byte_len").get<std::uint64_t>();
      if (shape.empty()) throw FormatError("tensor '" + name + "' has empty shape", kPrefix);
      std::uint64_t numel = 1;
      for (std::size_t d : shape) {
        if (d == 0 || numel > (std::uint64_t{1} << 40) / d) throw FormatError("tensor '" + name + "' has a bad shape", kPrefix);
        numel *= d;
      }
      if (len != numel * sizeof(float)) {
        throw FormatError("tensor '" + name + "' byte_len disagrees with its shape", kPrefix);
      }
      if (offset % kAlign != 0) throw FormatError("tensor '" + name + "' offset is not 64-byte aligned", kPrefix);
      const std::uint64_t begin = data_start_ + offset;
      if (offset > bytes_.size() || begin > bytes_.size() || len > bytes_.size() - begin) {
        throw FormatError("tensor '" + name + "' blob runs past end of file", std::min<std::uint64_t>(begin, bytes_.size()));
      }
      Tensor t(shape);
      std::memcpy(t.ptr(), bytes_.data() + begin, len);
      return t;
    } catch (const Json::exception& ex) {
      throw FormatError("tensor '" + name + "' entry malformed: " + ex.what(), kPrefix);
    }
  }

  bool has(const std::string& name) const { return entries_.contains(name); }

  void check_all_used() const {
    for (const auto& [name, _] : entries_.items()) {
      if (!used_.count(name)) throw FormatError("unexpected tensor '" + name + "' in header", kPrefix);
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  const Json& entries_;
  std::uint64_t data_start_;
  std::set<std::string> used_;
};

RouterWeights take_router(TensorTable& tt, SiteId site, const Json& entry) {
  RouterWeights r{tt.take(router_param(site, "Wh")), tt.take(router_param(site, "bh")), tt.take(router_param(site, "Wo")),
                  tt.take(router_param(site, "bo")), parse_router_output(entry.at("router_output").get<std::string>())};
  return r;
}

DenseModel assemble(TensorTable& tt, const Json& header) {
  DenseModel m;
  m.config = config_from_json(header.at("config"));
  m.config.validate();
  const Json& modules = header.at("modules");
  auto entry_of = [&](SiteId s) -> Json {
    auto it = modules.find(s.str());
    return it == modules.end() ? Json{{"form", "dense"}} : *it;
  };
  for (const auto& [key, _] : modules.items()) {
    const SiteId s = SiteId::parse(key);
    if (s.layer < 0 || s.layer >= m.config.num_layers) throw FormatError("module site '" + key + "' out of range", kPrefix);
  }
  auto take_ffn = [&](int l) {
    FfnWeights f{tt.take(ffn_param(l, "W1")), tt.take(ffn_param(l, "b1")), tt.take(ffn_param(l, "W2")),
                 tt.take(ffn_param(l, "b2")), std::nullopt};
    if (tt.has(ffn_param(l, "Wg"))) f.Wg = tt.take(ffn_param(l, "Wg"));
    f.check();
    return f;
  };
  auto build_moe = [&](SiteId s, FfnWeights src, const Json& e) {
    ExpertPartition p = partition_from_json(e.at("partition"));
    RouterWeights r = take_router(tt, s, e);
    return MoeLayer::build(s, std::move(src), std::move(p), std::move(r), policy_from_json(e.at("policy")),
                           parse_activation(e.at("activation").get<std::string>()));
  };
  auto pending = [&](SiteId s, const Json& e) {
    if (e.contains("partition")) m.partitions[s] = partition_from_json(e.at("partition"));
    if (e.contains("router_output")) m.routers[s] = take_router(tt, s, e);
  };

  m.token_embedding = tt.take("token_embedding");
  m.position_embedding = tt.take("position_embedding");
  for (int l = 0; l < m.config.num_layers; ++l) {
    Block b;
    const std::string pre = "layer." + std::to_string(l);
    b.ln1 = {tt.take(pre + ".ln1.gamma"), tt.take(pre + ".ln1.beta")};
    for (SiteKind k : kProjectionKinds) {
      const SiteId s{l, k};
      const Json e = entry_of(s);
      const std::string form = e.at("form").get<std::string>();
      auto& slot = b.proj[static_cast<std::size_t>(k)];
      if (form == "dense") {
        slot = LinearWeights{tt.take(projection_param(l, k, "W")), tt.take(projection_param(l, k, "b"))};
        pending(s, e);
      } else if (form == "replaced-mha" || form == "moe") {
        ReplacementMlp r{tt.take(replaced_param(l, k, "W_in")), tt.take(replaced_param(l, k, "b_in")),
                         tt.take(replaced_param(l, k, "W_out")), tt.take(replaced_param(l, k, "b_out")),
                         e.contains("source") ? SiteId::parse(e.at("source").get<std::string>()) : s};
        if (form == "moe") {
          slot = build_moe(s, r.as_ffn(), e);
        } else {
          slot = std::move(r);
          pending(s, e);
        }
      } else {
        throw FormatError("unknown module form '" + form + "' at " + s.str(), kPrefix);
      }
    }
    b.ln2 = {tt.take(pre + ".ln2.gamma"), tt.take(pre + ".ln2.beta")};
    const SiteId fs{l, SiteKind::ffn};
    const Json fe = entry_of(fs);
    const std::string form = fe.at("form").get<std::string>();
    if (form == "dense") {
      b.ffn = take_ffn(l);
      pending(fs, fe);
    } else if (form == "moe") {
      b.ffn = build_moe(fs, take_ffn(l), fe);
    } else {
      throw FormatError("unknown module form '" + form + "' at " + fs.str(), kPrefix);
    }
    m.layers.push_back(std::move(b));
  }
  m.final_ln = {tt.take("final_ln.gamma"), tt.take("final_ln.beta")};
  m.head = {tt.take("head.W"), tt.take("head.b")};
  tt.check_all_used();
  m.validate();
  return m;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const DenseModel& model) {
  model.validate();
  const auto tensors = model_tensors(model);
  Json header;
  header["format_version"] = kFormatVersion;
  header["config"] = to_json(model.config);
  Json modules = Json::object();
  for (int l = 0; l < model.config.num_layers; ++l) {
    for (SiteKind k : {SiteKind::q, SiteKind::k, SiteKind::v, SiteKind::o, SiteKind::ffn}) {
      const SiteId s{l, k};
      Json e = module_entry(model, s);
      if (e.size() > 1 || e["form"] != "dense") modules[s.str()] = std::move(e);
    }
  }
  header["modules"] = std::move(modules);
  Json entries = Json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (entries.contains(name)) throw ContractError("duplicate tensor name " + name);
    const std::uint64_t len = t->numel() * sizeof(float);
    entries[name] = {{"dtype", "f32"}, {"shape", t->shape()}, {"offset", offset}, {"byte_len", len}};
    offset = align_up(offset + len);
  }
  header["tensors"] = std::move(entries);
  const std::string text = header.dump();

  const std::uint64_t data_start = align_up(kPrefix + text.size());
  std::vector<std::uint8_t> out;
  out.reserve(data_start + offset);
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.resize(data_start, 0);
  for (const auto& [name, t] : tensors) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t->ptr());
    out.insert(out.end(), p, p + t->numel() * sizeof(float));
    out.resize(align_up(out.size() - data_start) + data_start, 0);
  }
  return out;
}

DenseModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPrefix) throw FormatError("file shorter than the 16-byte prefix", bytes.size());
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw FormatError("bad magic or version", 0);
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (hlen > bytes.size() - kPrefix) throw FormatError("header length exceeds file size", 8);
  Json header;
  try {
    header = Json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + hlen));
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what(), kPrefix + (e.byte > 0 ? e.byte - 1 : 0));
  }
  try {
    if (!header.is_object() || header.value("format_version", -1) != kFormatVersion) {
      throw FormatError("unsupported header format_version", kPrefix);
    }
    const std::uint64_t data_start = align_up(kPrefix + hlen);
    for (std::uint64_t i = kPrefix + hlen; i < std::min<std::uint64_t>(data_start, bytes.size()); ++i) {
      if (bytes[i] != 0) throw FormatError("non-zero padding after header", i);
    }
    TensorTable tt(bytes, header.at("tensors"), data_start);
    return assemble(tt, header);
  } catch (const FormatError&) {
    throw;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("header malformed: ") + e.what(), kPrefix);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint inconsistent: ") + e.what(), kPrefix);
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_checkpoint(const DenseModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_model(model));
}

DenseModel load_checkpoint(const std::filesystem::path& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace d2dmoe
