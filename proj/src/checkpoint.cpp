#include "mscqg/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace mscqg {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'C', 'Q', 'G', 'C', 'K', 'P'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
  void tensor(const Parameter& p) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) f32(p.value.data()[i]);
  }
  std::vector<char> bytes;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size, std::string where) : data_(data), size_(size), where_(std::move(where)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  void tensor(Parameter& p) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double v = f32();
      if (!std::isfinite(v)) fail("non-finite value in " + p.name);
      p.value.data()[i] = v;
    }
  }
  [[nodiscard]] bool done() const { return pos_ == size_; }
  [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(where_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) fail("truncated data");
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string where_;
};

std::vector<char> vocab_section(const Vocabulary& v) {
  Writer w;
  const auto words = v.regular_words();
  w.u32(static_cast<std::uint32_t>(words.size()));
  for (const auto& s : words) {
    w.u32(static_cast<std::uint32_t>(s.size()));
    w.raw(s);
  }
  return w.bytes;
}

std::vector<char> generator_section(const GeneratorParams& g) {
  Writer w;
  const auto& c = g.config;
  for (std::size_t x : {c.vocab_size, c.hidden, c.layers, c.heads, c.max_context}) w.u32(static_cast<std::uint32_t>(x));
  w.f64(c.layer_norm_eps);
  w.f64(g.final_loss);
  for (const Parameter* p : g.parameters()) w.tensor(*p);
  return w.bytes;
}

std::vector<char> coordinator_section(const CoordinatorParams& cp) {
  Writer w;
  const auto& c = cp.config;
  for (std::size_t x : {c.hidden, c.blocks, c.heads, c.max_length}) w.u32(static_cast<std::uint32_t>(x));
  w.f64(c.layer_norm_eps);
  for (const Parameter* p : cp.parameters()) w.tensor(*p);
  return w.bytes;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, std::vector<char>>> sections;
  if (ckpt.vocab) sections.emplace_back("VOCB", vocab_section(*ckpt.vocab));
  if (ckpt.generator) sections.emplace_back("GENR", generator_section(*ckpt.generator));
  if (ckpt.coordinator) sections.emplace_back("CORD", coordinator_section(*ckpt.coordinator));
  Writer head;
  head.raw(std::string(kMagic, sizeof kMagic));
  head.u32(kCheckpointVersion);
  head.u32(static_cast<std::uint32_t>(sections.size()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
  out.write(head.bytes.data(), static_cast<std::streamsize>(head.bytes.size()));
  for (const auto& [tag, payload] : sections) {
    Writer w;
    w.raw(tag);
    w.u64(payload.size());
    out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  if (!out) throw CheckpointError(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open checkpoint");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(buf.data(), buf.size(), path.string());
  if (r.raw(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) r.fail("not a checkpoint file");
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ck;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::string tag = r.raw(4);
    const auto size = r.u64();
    const std::string payload = r.raw(size);
    Reader p(payload.data(), payload.size(), path.string() + " [" + tag + "]");
    if (tag == "VOCB") {
      const auto n = p.u32();
      std::vector<std::string> words;
      for (std::uint32_t i = 0; i < n; ++i) words.push_back(p.raw(p.u32()));
      ck.vocab = Vocabulary::from_words(words);
    } else if (tag == "GENR") {
      GeneratorConfig c;
      c.vocab_size = p.u32();
      c.hidden = p.u32();
      c.layers = p.u32();
      c.heads = p.u32();
      c.max_context = p.u32();
      c.layer_norm_eps = p.f64();
      try {
        c.validate();
      } catch (const std::exception& e) {
        p.fail(e.what());
      }
      auto g = GeneratorParams::initialize(c);
      g.final_loss = p.f64();
      for (Parameter* t : g.parameters()) p.tensor(*t);
      ck.generator = std::move(g);
    } else if (tag == "CORD") {
      CoordinatorConfig c;
      c.hidden = p.u32();
      c.blocks = p.u32();
      c.heads = p.u32();
      c.max_length = p.u32();
      c.layer_norm_eps = p.f64();
      try {
        c.validate();
      } catch (const std::exception& e) {
        p.fail(e.what());
      }
      auto cp = CoordinatorParams::initialize(c);
      for (Parameter* t : cp.parameters()) p.tensor(*t);
      ck.coordinator = std::move(cp);
    } else {
      r.fail("unknown section tag '" + tag + "'");
    }
    if (!p.done()) p.fail("section has trailing bytes");
  }
  if (!r.done()) r.fail("trailing bytes after the last section");
  return ck;
}

}  // namespace mscqg
