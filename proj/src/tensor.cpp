#include "npnorm/tensor.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace npnorm {

static_assert(std::endian::native == std::endian::little,
              "NPNT I/O assumes a little-endian host");

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::require_finite(const std::string& what) const {
  if (!all_finite())
    throw std::invalid_argument(what + ": non-finite values");
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> t{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k)
      c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

}  // namespace

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
  static const auto table = make_crc_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i)
    c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void save_npnt(const Tensor& t, const std::string& path) {
  nlohmann::json header;
  header["dtype"] = "f64";
  header["shape"] = t.shape();
  header["order"] = "row-major";
  header["crc32"] = crc32_bytes(
      reinterpret_cast<const unsigned char*>(t.data()),
      t.numel() * sizeof(double));
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_npnt: cannot open " + path);
  f.write("NPNT", 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&hlen), 4);
  f.write(hs.data(), hs.size());
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!f) throw std::runtime_error("save_npnt: write failed for " + path);
}

Tensor load_npnt(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_npnt: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "NPNT", 4) != 0)
    throw std::runtime_error("load_npnt: bad magic at offset 0 in " + path);
  std::uint32_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 4);
  if (!f) throw std::runtime_error("load_npnt: truncated header length at offset 4 in " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw std::runtime_error("load_npnt: truncated header at offset 8 in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const std::exception& e) {
    throw std::runtime_error("load_npnt: malformed header JSON in " + path + ": " + e.what());
  }
  if (header.at("dtype").get<std::string>() != "f64")
    throw std::runtime_error("load_npnt: unsupported dtype in " + path);
  if (header.at("order").get<std::string>() != "row-major")
    throw std::runtime_error("load_npnt: unsupported order in " + path);
  auto shape = header.at("shape").get<std::vector<std::size_t>>();

  Tensor t(shape);
  const std::size_t nbytes = t.numel() * sizeof(double);
  f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
  if (static_cast<std::size_t>(f.gcount()) != nbytes)
    throw std::runtime_error("load_npnt: truncated payload at offset " +
                             std::to_string(8 + hlen + f.gcount()) + " in " + path);
  if (header.contains("crc32")) {
    const auto want = header.at("crc32").get<std::uint32_t>();
    const auto got = crc32_bytes(reinterpret_cast<const unsigned char*>(t.data()), nbytes);
    if (want != got)
      throw std::runtime_error("load_npnt: payload checksum mismatch in " + path);
  }
  t.require_finite("load_npnt(" + path + ")");
  return t;
}

}  // namespace npnorm
