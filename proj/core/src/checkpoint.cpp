#include "capslid/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstring>
#include <fstream>

namespace capslid {

namespace {

using nlohmann::json;

constexpr std::array<char, 4> kMagic{'C', 'L', 'I', 'D'};

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int bit = 0; bit < 8; ++bit)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i)
    crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back((v >> (8 * i)) & 0xFF);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back((v >> (8 * i)) & 0xFF);
  }
  void f32(float v) {
    std::uint32_t raw;
    std::memcpy(&raw, &v, 4);
    u32(raw);
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    std::uint32_t raw = u32();
    float v;
    std::memcpy(&v, &raw, 4);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_)
      throw Error(ErrorKind::IoError, "checkpoint truncated");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.raw(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) w.u64(d);
  for (double v : t.data) w.f32(static_cast<float>(v));
}

json model_config_json(const ModelConfig& c) {
  return json{{"input_rows", c.input_rows},
              {"input_cols", c.input_cols},
              {"kernel", c.kernel},
              {"conv1_channels", c.conv1_channels},
              {"primary_banks", c.primary_banks},
              {"primary_dim", c.primary_dim},
              {"mid_caps", c.mid_caps},
              {"mid_dim", c.mid_dim},
              {"lang_caps", c.lang_caps},
              {"lang_dim", c.lang_dim},
              {"dec_hidden1", c.dec_hidden1},
              {"dec_hidden2", c.dec_hidden2},
              {"routing_iterations", c.routing_iterations}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.input_rows = j.at("input_rows");
  c.input_cols = j.at("input_cols");
  c.kernel = j.at("kernel");
  c.conv1_channels = j.at("conv1_channels");
  c.primary_banks = j.at("primary_banks");
  c.primary_dim = j.at("primary_dim");
  c.mid_caps = j.at("mid_caps");
  c.mid_dim = j.at("mid_dim");
  c.lang_caps = j.at("lang_caps");
  c.lang_dim = j.at("lang_dim");
  c.dec_hidden1 = j.at("dec_hidden1");
  c.dec_hidden2 = j.at("dec_hidden2");
  c.routing_iterations = j.at("routing_iterations");
  return c;
}

json train_config_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"seed", c.seed},
              {"routing_iterations", c.routing_iterations},
              {"grad_clip_norm", c.grad_clip_norm}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.learning_rate = j.at("learning_rate");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.epsilon = j.at("epsilon");
  c.seed = j.at("seed");
  c.routing_iterations = j.at("routing_iterations");
  c.grad_clip_norm = j.at("grad_clip_norm");
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.u64(ckpt.step);

  auto named = ckpt.params.named_tensors();
  if (ckpt.opt.m.size() != named.size() || ckpt.opt.v.size() != named.size())
    throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match params");
  w.u32(static_cast<std::uint32_t>(3 * named.size()));
  for (std::size_t i = 0; i < named.size(); ++i)
    write_tensor(w, named[i].first, *named[i].second);
  for (std::size_t i = 0; i < named.size(); ++i)
    write_tensor(w, "opt.m." + named[i].first, ckpt.opt.m[i]);
  for (std::size_t i = 0; i < named.size(); ++i)
    write_tensor(w, "opt.v." + named[i].first, ckpt.opt.v[i]);

  json meta;
  meta["model"] = model_config_json(ckpt.params.config);
  meta["train"] = train_config_json(ckpt.train_config);
  if (ckpt.thresholds) {
    meta["thresholds"] = {{"tau", ckpt.thresholds->tau},
                          {"counts", ckpt.thresholds->counts}};
  }
  const std::string text = meta.dump();
  w.u64(text.size());
  w.raw(text.data(), text.size());

  w.u32(crc32(w.bytes.data(), w.bytes.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::IoError, "read failed: " + path.string());

  if (bytes.size() < kMagic.size() + 4 + 8 + 4 ||
      std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw Error(ErrorKind::IoError, "not a checkpoint file: " + path.string());

  // Verify integrity before interpreting any field, so a corrupted byte is
  // always reported as a checksum problem.
  Reader crc_reader(bytes.data() + bytes.size() - 4, 4);
  const std::uint32_t stored = crc_reader.u32();
  if (crc32(bytes.data(), bytes.size() - 4) != stored)
    throw Error(ErrorKind::ChecksumMismatch, path.string());

  Reader r(bytes.data(), bytes.size() - 4);
  r.str(kMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::VersionMismatch,
                "checkpoint version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));

  Checkpoint ckpt;
  ckpt.step = r.u64();

  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Tensor>> table;
  table.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<std::size_t>(r.u64());
    Tensor t(shape);
    for (double& v : t.data) v = static_cast<double>(r.f32());
    table.emplace_back(std::move(name), std::move(t));
  }

  const std::uint64_t json_len = r.u64();
  json meta = json::parse(r.str(json_len), nullptr, false);
  if (meta.is_discarded())
    throw Error(ErrorKind::IoError, "checkpoint metadata is not valid JSON");

  ModelConfig mc = model_config_from_json(meta.at("model"));
  ckpt.params = ModelParams::init(mc, 0);
  ckpt.opt = AdamState::init(ckpt.params);
  ckpt.opt.step = ckpt.step;
  ckpt.train_config = train_config_from_json(meta.at("train"));
  if (meta.contains("thresholds")) {
    ThresholdTable tt;
    tt.tau = meta["thresholds"].at("tau").get<std::vector<double>>();
    tt.counts = meta["thresholds"].at("counts").get<std::vector<std::size_t>>();
    ckpt.thresholds = std::move(tt);
  }

  auto named = ckpt.params.named_tensors();
  auto take = [&](const std::string& name) -> Tensor& {
    for (auto& [entry_name, tensor] : table)
      if (entry_name == name) return tensor;
    throw Error(ErrorKind::IoError, "checkpoint is missing tensor " + name);
  };
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor& stored_t = take(named[i].first);
    if (stored_t.shape != named[i].second->shape)
      throw Error(ErrorKind::IoError,
                  "tensor " + named[i].first + " has shape " +
                      shape_string(stored_t.shape) + ", model needs " +
                      shape_string(named[i].second->shape));
    *named[i].second = std::move(stored_t);
    ckpt.opt.m[i] = std::move(take("opt.m." + named[i].first));
    ckpt.opt.v[i] = std::move(take("opt.v." + named[i].first));
  }
  return ckpt;
}

}  // namespace capslid
