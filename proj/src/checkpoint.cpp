#include "hvtsurv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hvtsurv/error.hpp"

namespace hvtsurv {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::string where) : buf_(buf), where_(std::move(where)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    require(buf_.size() - pos_ >= n, ErrorKind::Corruption, "truncated checkpoint " + where_);
  }

  const std::vector<char>& buf_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string text;
  for (const auto& [k, v] : ckpt.config) {
    require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
            ErrorKind::Precondition, "checkpoint config entries must be single-line key=value");
    text += k + "=" + v + "\n";
  }
  std::string out = "HVTC";
  put_u32(out, Checkpoint::kVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    require(t.values.size() == std::size_t(t.rows) * t.cols, ErrorKind::Precondition,
            "tensor '" + t.name + "' has inconsistent shape");
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, t.rows);
    put_u32(out, t.cols);
    for (float f : t.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open checkpoint '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader rd(buf, "'" + path.string() + "'");
  require(buf.size() >= 4 && std::memcmp(buf.data(), "HVTC", 4) == 0, ErrorKind::Format,
          "not a checkpoint: '" + path.string() + "'");
  rd.bytes(4);
  const auto version = rd.u32();
  require(version == Checkpoint::kVersion, ErrorKind::Version,
          "checkpoint version " + std::to_string(version) + " is not supported");

  Checkpoint ckpt;
  std::istringstream text(rd.bytes(rd.u32()));
  std::string line;
  while (std::getline(text, line)) {
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::Corruption, "bad config line in checkpoint: " + line);
    ckpt.config[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = rd.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = rd.bytes(rd.u32());
    t.rows = rd.u32();
    t.cols = rd.u32();
    const std::string payload = rd.bytes(std::size_t(t.rows) * t.cols * 4);
    t.values.resize(std::size_t(t.rows) * t.cols);
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(payload[k * 4 + b])) << (8 * b);
      t.values[k] = std::bit_cast<float>(bits);
    }
    ckpt.tensors.push_back(std::move(t));
  }
  require(rd.done(), ErrorKind::Corruption, "trailing bytes in checkpoint '" + path.string() + "'");
  return ckpt;
}

}  // namespace hvtsurv
