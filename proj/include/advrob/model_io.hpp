#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "advrob/error.hpp"
#include "advrob/layers.hpp"
#include "advrob/network.hpp"
#include "advrob/preprocess.hpp"
#include "advrob/tensor.hpp"

namespace advrob {

/// Model file layout (version 1):
///
///   advrob-model 1\n                 magic + format version
///   dtype f32|f64\n
///   input C H W\n
///   classes K\n
///   transform <kind>\n
///   layer <kind> key=value ...\n      one line per layer, in order
///   meta key=value\n                 zero or more provenance entries
///   tensor <name> d0 d1 ...\n        one line per stored tensor, payload order
///   payload <bytes>\n
///   end\n
///   <payload>                        raw little-endian tensors, concatenated
///   crc32 xxxxxxxx\n                 CRC-32 of every byte before this line
inline constexpr int kModelFormatVersion = 1;

/// Free-form provenance stored with a model (training seed, epochs, ...).
using ModelMeta = std::map<std::string, std::string>;

template <std::floating_point Real>
struct ModelBundle {
  Network<Real> network;
  Transform<Real> transform;
  ModelMeta meta;
};

namespace detail {

template <class Real>
constexpr const char* dtype_name() {
  return sizeof(Real) == 4 ? "f32" : "f64";
}

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <class T>
void append_le(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T read_le(const unsigned char* p) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline std::map<std::string, std::string> parse_kv(std::istringstream& is) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline std::size_t kv_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("layer is missing '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw FormatError("bad value for '" + key + "': " + it->second);
  }
}

}  // namespace detail

/// Serializes a network, its transform and provenance to bytes.
template <std::floating_point Real>
std::string serialize_model(const Network<Real>& net, const Transform<Real>& transform, const ModelMeta& meta = {}) {
  std::ostringstream h;
  std::vector<std::pair<std::string, const Tensor<Real>*>> tensors;
  h << "advrob-model " << kModelFormatVersion << "\n";
  h << "dtype " << detail::dtype_name<Real>() << "\n";
  h << "input";
  for (auto e : net.input_shape()) h << ' ' << e;
  h << "\nclasses " << net.num_classes() << "\n";
  h << "transform " << to_string(transform.kind()) << " channels=" << transform.channels() << "\n";
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    std::visit(overloaded{
                   [&](const Conv2D<Real>& l) {
                     h << "layer conv2d in=" << l.in_channels << " out=" << l.out_channels << " kh=" << l.kernel_h
                       << " kw=" << l.kernel_w << " stride=" << l.stride << " pad=" << l.padding << "\n";
                     tensors.emplace_back(p + "weight", &l.weight);
                     tensors.emplace_back(p + "bias", &l.bias);
                   },
                   [&](const Dense<Real>& l) {
                     h << "layer dense in=" << l.in_features << " out=" << l.out_features << "\n";
                     tensors.emplace_back(p + "weight", &l.weight);
                     tensors.emplace_back(p + "bias", &l.bias);
                   },
                   [&](const ReLU&) { h << "layer relu\n"; },
                   [&](const MaxPool2D& l) { h << "layer maxpool2d kernel=" << l.kernel << " stride=" << l.stride << "\n"; },
                   [&](const AvgPool2D& l) { h << "layer avgpool2d kernel=" << l.kernel << " stride=" << l.stride << "\n"; },
                   [&](const BatchNormInference<Real>& l) {
                     h << "layer batchnorm channels=" << l.channels << " eps=" << detail::hexfloat(l.epsilon) << "\n";
                     tensors.emplace_back(p + "gamma", &l.gamma);
                     tensors.emplace_back(p + "beta", &l.beta);
                     tensors.emplace_back(p + "running_mean", &l.running_mean);
                     tensors.emplace_back(p + "running_var", &l.running_var);
                   },
                   [&](const Flatten&) { h << "layer flatten\n"; },
               },
               net.layers()[i]);
  }
  if (transform.kind() != TransformKind::Identity) tensors.emplace_back("transform.mean", &transform.mean());
  if (transform.kind() == TransformKind::PerChannelNormalize) tensors.emplace_back("transform.std", &transform.stddev());
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n=") != std::string::npos || v.find_first_of(" \n") != std::string::npos)
      throw InvalidArgument("model meta entries may not contain spaces or newlines: " + k);
    h << "meta " << k << '=' << v << "\n";
  }
  std::string payload;
  for (const auto& [name, t] : tensors) {
    h << "tensor " << name;
    for (auto e : t->shape()) h << ' ' << e;
    h << "\n";
    for (Real v : t->values()) detail::append_le(payload, v);
  }
  h << "payload " << payload.size() << "\nend\n";
  std::string out = h.str() + payload;
  char trailer[32];
  std::snprintf(trailer, sizeof trailer, "crc32 %08x\n",
                detail::crc32_of(reinterpret_cast<const unsigned char*>(out.data()), out.size()));
  out += trailer;
  return out;
}

/// Parses bytes produced by serialize_model. The format version is checked
/// first, then the checksum, then the contents; nothing is returned unless
/// every check passes. Tensors stored at a different precision than Real
/// are converted.
template <std::floating_point Real>
ModelBundle<Real> deserialize_model(const std::string& bytes) {
  const auto first_nl = bytes.find('\n');
  if (first_nl == std::string::npos) throw FormatError("model file has no header");
  {
    std::istringstream first(bytes.substr(0, first_nl));
    std::string magic;
    int version = 0;
    first >> magic >> version;
    if (magic != "advrob-model") throw FormatError("not a model file (bad magic)");
    if (version != kModelFormatVersion)
      throw VersionError("model format version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kModelFormatVersion) + ")");
  }
  const std::string end_marker = "\nend\n";
  const auto end_pos = bytes.find(end_marker);
  if (end_pos == std::string::npos) throw FormatError("model header is not terminated");
  const std::size_t header_len = end_pos + end_marker.size();
  const std::string header = bytes.substr(0, header_len);

  // Locate the payload length first so the checksum can be verified before
  // anything else is trusted.
  std::size_t payload_len = 0;
  {
    const auto pp = header.rfind("\npayload ");
    if (pp == std::string::npos) throw FormatError("model header has no payload line");
    try {
      payload_len = static_cast<std::size_t>(std::stoull(header.substr(pp + 9)));
    } catch (const std::exception&) {
      throw FormatError("bad payload length");
    }
  }
  const std::size_t body_len = header_len + payload_len;
  if (bytes.size() < body_len) throw FormatError("model file truncated");
  const std::string trailer = bytes.substr(body_len);
  unsigned stored = 0;
  if (trailer.size() != 15 || std::sscanf(trailer.c_str(), "crc32 %8x", &stored) != 1 || trailer.back() != '\n')
    throw FormatError("model file has a malformed checksum trailer");
  const auto actual = detail::crc32_of(reinterpret_cast<const unsigned char*>(bytes.data()), body_len);
  if (actual != stored) throw ChecksumError("model checksum mismatch");

  std::istringstream hs(header);
  std::string line;
  std::string dtype;
  Shape input;
  std::size_t classes = 0;
  TransformKind tkind = TransformKind::Identity;
  std::size_t tchannels = 0;
  std::vector<Layer<Real>> layers;
  ModelMeta meta;
  std::vector<std::pair<std::string, Shape>> tensor_decl;
  std::getline(hs, line);  // magic
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "dtype") {
      ls >> dtype;
    } else if (key == "input") {
      std::size_t e;
      while (ls >> e) input.push_back(e);
    } else if (key == "classes") {
      ls >> classes;
    } else if (key == "transform") {
      std::string kind;
      ls >> kind;
      tkind = parse_transform_kind(kind);
      auto kv = detail::parse_kv(ls);
      tchannels = detail::kv_size(kv, "channels");
    } else if (key == "layer") {
      std::string kind;
      ls >> kind;
      auto kv = detail::parse_kv(ls);
      using detail::kv_size;
      if (kind == "conv2d") {
        Conv2D<Real> l;
        l.in_channels = kv_size(kv, "in");
        l.out_channels = kv_size(kv, "out");
        l.kernel_h = kv_size(kv, "kh");
        l.kernel_w = kv_size(kv, "kw");
        l.stride = kv_size(kv, "stride");
        l.padding = kv_size(kv, "pad");
        layers.emplace_back(std::move(l));
      } else if (kind == "dense") {
        Dense<Real> l;
        l.in_features = kv_size(kv, "in");
        l.out_features = kv_size(kv, "out");
        layers.emplace_back(std::move(l));
      } else if (kind == "relu") {
        layers.emplace_back(ReLU{});
      } else if (kind == "maxpool2d") {
        layers.emplace_back(MaxPool2D{kv_size(kv, "kernel"), kv_size(kv, "stride")});
      } else if (kind == "avgpool2d") {
        layers.emplace_back(AvgPool2D{kv_size(kv, "kernel"), kv_size(kv, "stride")});
      } else if (kind == "batchnorm") {
        BatchNormInference<Real> l;
        l.channels = kv_size(kv, "channels");
        if (!kv.count("eps")) throw FormatError("batchnorm layer is missing 'eps'");
        l.epsilon = static_cast<Real>(std::strtod(kv["eps"].c_str(), nullptr));
        layers.emplace_back(std::move(l));
      } else if (kind == "flatten") {
        layers.emplace_back(Flatten{});
      } else {
        throw FormatError("unknown layer kind '" + kind + "'");
      }
    } else if (key == "meta") {
      std::string kv;
      ls >> kv;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw FormatError("bad meta line");
      meta[kv.substr(0, eq)] = kv.substr(eq + 1);
    } else if (key == "tensor") {
      std::string name;
      ls >> name;
      Shape s;
      std::size_t e;
      while (ls >> e) s.push_back(e);
      tensor_decl.emplace_back(name, s);
    } else if (key == "payload" || key == "end" || key.empty()) {
      continue;
    } else {
      throw FormatError("unknown header line '" + line + "'");
    }
  }
  if (dtype != "f32" && dtype != "f64") throw FormatError("unknown dtype '" + dtype + "'");
  const std::size_t elem = dtype == "f32" ? 4 : 8;

  std::size_t expected = 0;
  for (const auto& [n, s] : tensor_decl) expected += shape_volume(s) * elem;
  if (expected != payload_len)
    throw ShapeError("declared tensor shapes need " + std::to_string(expected) + " payload bytes, file has " +
                     std::to_string(payload_len));

  std::map<std::string, Tensor<Real>> stored_tensors;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + header_len;
  for (const auto& [name, s] : tensor_decl) {
    Tensor<Real> t(s);
    for (std::size_t i = 0; i < t.size(); ++i, p += elem)
      t[i] = elem == 4 ? static_cast<Real>(detail::read_le<float>(p)) : static_cast<Real>(detail::read_le<double>(p));
    stored_tensors.emplace(name, std::move(t));
  }
  auto take = [&](const std::string& name) {
    auto it = stored_tensors.find(name);
    if (it == stored_tensors.end()) throw FormatError("model file is missing tensor " + name);
    Tensor<Real> t = std::move(it->second);
    stored_tensors.erase(it);
    return t;
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string pre = "layer" + std::to_string(i) + ".";
    std::visit(overloaded{
                   [&](Conv2D<Real>& l) {
                     l.weight = take(pre + "weight");
                     l.bias = take(pre + "bias");
                   },
                   [&](Dense<Real>& l) {
                     l.weight = take(pre + "weight");
                     l.bias = take(pre + "bias");
                   },
                   [&](BatchNormInference<Real>& l) {
                     l.gamma = take(pre + "gamma");
                     l.beta = take(pre + "beta");
                     l.running_mean = take(pre + "running_mean");
                     l.running_var = take(pre + "running_var");
                   },
                   [](auto&) {},
               },
               layers[i]);
  }
  ModelBundle<Real> bundle{Network<Real>(input, classes, std::move(layers)), Transform<Real>::identity(tchannels),
                           std::move(meta)};
  if (tkind == TransformKind::MeanPixelSubtract) {
    bundle.transform = Transform<Real>::mean_pixel_subtract(take("transform.mean"));
  } else if (tkind == TransformKind::PerChannelNormalize) {
    auto m = take("transform.mean");
    auto s = take("transform.std");
    bundle.transform = Transform<Real>::per_channel_normalize(m.values(), s.values());
  }
  if (!stored_tensors.empty()) throw FormatError("model file has unused tensor " + stored_tensors.begin()->first);
  bundle.transform.check_sample_shape(bundle.network.input_shape());
  return bundle;
}

/// Writes to `path` via a temporary file and rename, so readers never see a
/// partially written model.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw MissingFileError("file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

template <std::floating_point Real>
void save_model(const Network<Real>& net, const Transform<Real>& transform, const std::filesystem::path& path,
                const ModelMeta& meta = {}) {
  write_file_atomic(path, serialize_model(net, transform, meta));
}

template <std::floating_point Real>
ModelBundle<Real> load_model(const std::filesystem::path& path) {
  return deserialize_model<Real>(read_file(path));
}

}  // namespace advrob
