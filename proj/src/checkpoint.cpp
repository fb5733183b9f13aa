#include "cdrop/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "cdrop/errors.hpp"

namespace cdrop {
namespace {

constexpr std::uint32_t kMagic = 0x43445250;  // "CDRP"
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ofstream& out, std::uint64_t x) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(x >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

void put_u32(std::ofstream& out, std::uint32_t x) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(x >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void put_u8(std::ofstream& out, std::uint8_t x) {
  out.put(static_cast<char>(x));
}

void put_f64(std::ofstream& out, double x) {
  put_u64(out, std::bit_cast<std::uint64_t>(x));
}

struct Reader {
  std::ifstream in;
  std::string path;
  std::uint64_t remaining = 0;

  explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw DataError("cannot open checkpoint file '" + p + "'");
    in.seekg(0, std::ios::end);
    remaining = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0, std::ios::beg);
  }

  void need(std::uint64_t bytes, const char* what) {
    if (remaining < bytes)
      throw FormatError("checkpoint '" + path + "' truncated while reading " +
                        what);
    remaining -= bytes;
  }

  std::uint64_t get_u64(const char* what) {
    need(8, what);
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= std::uint64_t(buf[i]) << (8 * i);
    return x;
  }

  std::uint32_t get_u32(const char* what) {
    need(4, what);
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= std::uint32_t(buf[i]) << (8 * i);
    return x;
  }

  std::uint8_t get_u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(in.get());
  }

  double get_f64(const char* what) {
    return std::bit_cast<double>(get_u64(what));
  }

  // For bulk payload already accounted for via need(): no size re-check.
  double get_f64_raw() {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(buf[i]) << (8 * i);
    return std::bit_cast<double>(bits);
  }

  Eigen::Index get_dim(const char* what) {
    const std::uint64_t x = get_u64(what);
    // A dimension bigger than the remaining payload could even hold is a
    // corrupt header, not a size to allocate.
    if (x == 0 || x > remaining)
      throw FormatError("checkpoint '" + path + "' has implausible " +
                        std::string(what) + " " + std::to_string(x));
    return static_cast<Eigen::Index>(x);
  }
};

}  // namespace

void save_checkpoint(const Mlp& model, const std::string& path) {
  if (model.layers.empty())
    throw ArgumentError("save_checkpoint: model has no layers");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint file '" + path + "' for writing");

  put_u32(out, kMagic);
  put_u32(out, kVersion);
  put_u8(out, model.heteroscedastic ? 1 : 0);
  put_u64(out, static_cast<std::uint64_t>(model.output_dim));
  put_f64(out, model.log_tau);
  put_u64(out, model.layers.size());

  for (const auto& layer : model.layers) {
    put_u64(out, static_cast<std::uint64_t>(layer.out_dim()));
    put_u64(out, static_cast<std::uint64_t>(layer.in_dim()));
    put_u8(out, layer.inner.activation == Activation::relu ? 1 : 0);
    put_u8(out, layer.dropout_enabled ? 1 : 0);
    put_f64(out, layer.p_logit);
    put_f64(out, layer.temperature);
    put_f64(out, layer.weight_reg);
    put_f64(out, layer.dropout_reg);
    for (Eigen::Index i = 0; i < layer.out_dim(); ++i)
      for (Eigen::Index j = 0; j < layer.in_dim(); ++j)
        put_f64(out, layer.inner.W(i, j));
    for (Eigen::Index i = 0; i < layer.out_dim(); ++i)
      put_f64(out, layer.inner.b(i));
  }
  if (!out) throw DataError("write to checkpoint file '" + path + "' failed");
}

Mlp load_checkpoint(const std::string& path) {
  Reader r(path);

  const std::uint32_t magic = r.get_u32("magic");
  if (magic != kMagic)
    throw FormatError("checkpoint '" + path + "' has magic " +
                      std::to_string(magic) + ", expected " +
                      std::to_string(kMagic));
  const std::uint32_t version = r.get_u32("version");
  if (version != kVersion)
    throw FormatError("checkpoint '" + path + "' has version " +
                      std::to_string(version) + ", this build reads version " +
                      std::to_string(kVersion));

  Mlp model;
  model.heteroscedastic = r.get_u8("heteroscedastic flag") != 0;
  model.output_dim = static_cast<Eigen::Index>(r.get_u64("output dimension"));
  model.log_tau = r.get_f64("log_tau");
  const std::uint64_t n_layers = r.get_u64("layer count");
  if (n_layers == 0 || n_layers > r.remaining)
    throw FormatError("checkpoint '" + path + "' has implausible layer count " +
                      std::to_string(n_layers));

  for (std::uint64_t k = 0; k < n_layers; ++k) {
    const Eigen::Index out_dim = r.get_dim("layer output width");
    const Eigen::Index in_dim = r.get_dim("layer input width");
    const std::uint8_t act = r.get_u8("activation code");
    if (act > 1)
      throw FormatError("checkpoint '" + path + "' has unknown activation code " +
                        std::to_string(act));
    const bool dropout_enabled = r.get_u8("dropout flag") != 0;
    const double p_logit = r.get_f64("p_logit");
    const double temperature = r.get_f64("temperature");
    if (!(temperature > 0.0))
      throw FormatError("checkpoint '" + path + "' has non-positive temperature");
    const double weight_reg = r.get_f64("weight coefficient");
    const double dropout_reg = r.get_f64("dropout coefficient");

    r.need(8 * static_cast<std::uint64_t>(out_dim) *
               static_cast<std::uint64_t>(in_dim) +
           8 * static_cast<std::uint64_t>(out_dim),
           "layer parameters");
    DenseLayer dense;
    dense.W = Matrix(out_dim, in_dim);
    dense.b = Vector(out_dim);
    dense.activation = act == 1 ? Activation::relu : Activation::identity;
    for (Eigen::Index i = 0; i < out_dim; ++i)
      for (Eigen::Index j = 0; j < in_dim; ++j) dense.W(i, j) = r.get_f64_raw();
    for (Eigen::Index i = 0; i < out_dim; ++i) dense.b(i) = r.get_f64_raw();

    ConcreteDropoutLayer layer(std::move(dense), p_logit, temperature);
    layer.dropout_enabled = dropout_enabled;
    layer.weight_reg = weight_reg;
    layer.dropout_reg = dropout_reg;
    model.layers.push_back(std::move(layer));
  }

  for (std::size_t k = 1; k < model.layers.size(); ++k)
    if (model.layers[k].in_dim() != model.layers[k - 1].out_dim())
      throw FormatError("checkpoint '" + path + "' layer " + std::to_string(k) +
                        " input width " + std::to_string(model.layers[k].in_dim()) +
                        " does not match previous output width " +
                        std::to_string(model.layers[k - 1].out_dim()));
  const Eigen::Index head = model.layers.back().out_dim();
  const Eigen::Index expected = model.heteroscedastic ? 2 * model.output_dim
                                                      : model.output_dim;
  if (head != expected)
    throw FormatError("checkpoint '" + path + "' head width " +
                      std::to_string(head) + " does not match output dimension " +
                      std::to_string(model.output_dim));
  return model;
}

}  // namespace cdrop
