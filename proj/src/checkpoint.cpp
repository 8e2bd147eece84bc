#include "cellprompt/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "cellprompt/error.hpp"

namespace cellprompt {

static_assert(std::endian::native == std::endian::little, "container encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'P', 'R', 'M', 'P', 'T', '\r', '\n'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> bytes, std::size_t at) {
  if (at + sizeof(T) > bytes.size()) throw FormatError("container: truncated");
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof(T));
  return v;
}

} // namespace

const nn::Matrix& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw NotFound("container has no tensor '" + name + "'");
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.value.size()) * sizeof(double);
    table.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"dtype", "f64le"},
                     {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const nlohmann::json header{{"kind", c.kind},
                              {"schema_version", c.schema_version},
                              {"metadata", c.metadata.is_null() ? nlohmann::json::object() : c.metadata},
                              {"tensors", table}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, kContainerFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : c.tensors) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wide = t.value.cast<double>();
    const auto* p = reinterpret_cast<const std::uint8_t*>(wide.data());
    out.insert(out.end(), p, p + wide.size() * sizeof(double));
  }
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("container: bad magic");
  const auto version = get<std::uint32_t>(bytes, 8);
  if (version != kContainerFormatVersion)
    throw FormatError("container: unsupported format version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, 12);
  const std::size_t data_start = 20 + header_len;
  if (data_start > bytes.size()) throw FormatError("container: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
    Container c;
    c.kind = header.at("kind").get<std::string>();
    c.schema_version = header.at("schema_version").get<int>();
    c.metadata = header.at("metadata");
    for (const auto& entry : header.at("tensors")) {
      if (entry.at("dtype").get<std::string>() != "f64le") throw FormatError("container: unsupported dtype");
      const auto rows = entry.at("rows").get<Eigen::Index>();
      const auto cols = entry.at("cols").get<Eigen::Index>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (rows < 0 || cols < 0 || nbytes != static_cast<std::uint64_t>(rows * cols) * sizeof(double) ||
          data_start + offset + nbytes > bytes.size())
        throw FormatError("container: tensor '" + entry.at("name").get<std::string>() + "' out of bounds");
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wide(rows, cols);
      std::memcpy(wide.data(), bytes.data() + data_start + offset, nbytes);
      c.tensors.push_back({entry.at("name").get<std::string>(), wide.cast<nn::real>()});
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: malformed header: ") + e.what());
  }
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFound("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1)
    throw Error("sha256: initialisation failed");
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, std::size_t size) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, size);
}

void Sha256::update(const nn::Matrix& m) {
  const std::int64_t shape[2] = {m.rows(), m.cols()};
  update(shape, sizeof(shape));
  // hashed as doubles so both precisions agree on float-representable weights
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wide = m.cast<double>();
  update(wide.data(), static_cast<std::size_t>(wide.size()) * sizeof(double));
}

std::string Sha256::hex_digest() {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), digest, &len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex_digest();
}

} // namespace cellprompt
