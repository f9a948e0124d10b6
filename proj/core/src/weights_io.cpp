#include "dare/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "dare/error.hpp"
#include "dare/serialize.hpp"

namespace dare {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'R', 'E'};
constexpr std::size_t kPreamble = 12;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

void put_f64(std::vector<std::uint8_t>& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

// Tensors in manifest order. W is ModelWeights or const ModelWeights.
template <typename W>
auto tensor_list(W& w) {
  using Ptr = decltype(&w.embedding);
  std::vector<std::pair<std::string, Ptr>> out;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& lw = w.layers[l];
    out.emplace_back(p + "w_q", &lw.w_q);
    out.emplace_back(p + "w_k", &lw.w_k);
    out.emplace_back(p + "w_v", &lw.w_v);
    out.emplace_back(p + "w_o", &lw.w_o);
    out.emplace_back(p + "w_u", &lw.w_u);
    out.emplace_back(p + "w_d", &lw.w_d);
  }
  out.emplace_back("embedding", &w.embedding);
  return out;
}

nlohmann::json parse_header(const std::vector<std::uint8_t>& bytes, std::size_t& payload_start) {
  if (bytes.size() < kPreamble || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("weights: bad magic");
  }
  const auto version = get_u32(bytes.data() + 4);
  if (version != kWeightFormatVersion) {
    throw FormatError("weights: unsupported version " + std::to_string(version));
  }
  const auto header_len = get_u32(bytes.data() + 8);
  if (bytes.size() < kPreamble + header_len) throw FormatError("weights: truncated header");
  payload_start = kPreamble + header_len;
  try {
    return nlohmann::json::parse(bytes.begin() + kPreamble,
                                 bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights: header is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::vector<std::uint8_t> encode_weights(const ModelWeights& weights) {
  weights.validate();
  nlohmann::json header;
  header["config"] = weights.config;
  header["mask_token"] = weights.mask_token;
  auto tensors = nlohmann::json::array();
  std::size_t offset = 0;
  const auto list = tensor_list(weights);
  for (const auto& [name, m] : list) {
    tensors.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
    offset += m->size() * sizeof(double);
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kWeightFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, m] : list) {
    for (double x : m->data()) put_f64(out, x);
  }
  return out;
}

std::vector<TensorEntry> read_manifest(const std::vector<std::uint8_t>& bytes,
                                       std::size_t* payload_start) {
  std::size_t start = 0;
  const auto header = parse_header(bytes, start);
  if (payload_start) *payload_start = start;
  std::vector<TensorEntry> entries;
  try {
    for (const auto& t : header.at("tensors")) {
      entries.push_back({t.at("name").get<std::string>(), t.at("rows").get<std::size_t>(),
                         t.at("cols").get<std::size_t>(), t.at("offset").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights: bad manifest: ") + e.what());
  }
  return entries;
}

ModelWeights decode_weights(const std::vector<std::uint8_t>& bytes) {
  std::size_t start = 0;
  const auto header = parse_header(bytes, start);
  const auto entries = read_manifest(bytes, nullptr);

  ModelWeights w;
  try {
    w.config = header.at("config").get<ModelConfig>();
    w.mask_token = header.at("mask_token").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights: bad header: ") + e.what());
  }
  w.config.validate();
  w.layers.resize(w.config.layers);

  // Allocate with the expected shapes, then fill from the manifest by name.
  const std::size_t d = w.config.d_model;
  for (auto& lw : w.layers) {
    lw.w_q = Matrix(d, d);
    lw.w_k = Matrix(d, d);
    lw.w_v = Matrix(d, d);
    lw.w_o = Matrix(d, d);
    lw.w_u = Matrix(d, w.config.d_int);
    lw.w_d = Matrix(w.config.d_int, d);
  }
  w.embedding = Matrix(w.config.n_vocab, d);

  const auto expected = tensor_list(w);
  if (entries.size() != expected.size()) throw FormatError("weights: tensor count mismatch");
  for (std::size_t t = 0; t < expected.size(); ++t) {
    const auto& e = entries[t];
    Matrix* m = expected[t].second;
    if (e.name != expected[t].first || e.rows != m->rows() || e.cols != m->cols()) {
      throw FormatError("weights: unexpected tensor '" + e.name + "'");
    }
    const std::size_t begin = start + e.offset;
    if (begin + m->size() * sizeof(double) > bytes.size()) {
      throw FormatError("weights: tensor '" + e.name + "' runs past end of file");
    }
    auto dst = m->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = get_f64(bytes.data() + begin + 8 * i);
  }
  w.radius = norm_2_to_inf(w.embedding);
  w.validate();
  return w;
}

void save_weights(const std::filesystem::path& path, const ModelWeights& weights) {
  const auto bytes = encode_weights(weights);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_weights(bytes);
}

}  // namespace dare
