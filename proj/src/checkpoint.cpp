#include "ikdmil/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ikdmil/common.hpp"

namespace ikdmil {

namespace {

constexpr char kMagic[8] = {'I', 'K', 'D', 'M', 'I', 'L', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_i32(std::ostream& out, int32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t get_u32(std::istream& in, const char* what) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  return v;
}

int32_t get_i32(std::istream& in, const char* what) {
  int32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  return v;
}

std::string get_string(std::istream& in, const char* what) {
  const uint32_t n = get_u32(in, what);
  if (n > (1u << 20)) {
    throw IoError(std::string("implausible string length in checkpoint field ") + what);
  }
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) {
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  return s;
}

}  // namespace

Checkpoint Checkpoint::from_model(const SegModel& model, const std::string& stage) {
  Checkpoint ckpt;
  ckpt.spec = model.spec();
  ckpt.stage = stage;
  for (const auto& p : model.parameters()) {
    ckpt.tensors.emplace_back(p.name, *p.tensor);
  }
  return ckpt;
}

SegModel Checkpoint::restore_model() const {
  SegModel model = SegModel::build(spec, /*seed=*/0);
  auto params = model.parameters();
  if (params.size() != tensors.size()) {
    throw IncompatibilityError("checkpoint holds " + std::to_string(tensors.size()) +
                               " tensors but the rebuilt model expects " +
                               std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, stored] = tensors[i];
    if (params[i].name != name) {
      throw IncompatibilityError("checkpoint tensor '" + name + "' does not match model slot '" +
                                 params[i].name + "'");
    }
    if (!params[i].tensor->same_shape(stored)) {
      throw IncompatibilityError("checkpoint tensor '" + name + "' has shape " +
                                 stored.shape_str() + " but the model expects " +
                                 params[i].tensor->shape_str());
    }
    params[i].tensor->raw() = stored.raw();
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  save_checkpoint_stream(out, ckpt);
  if (!out.good()) throw IoError("failed while writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  try {
    return load_checkpoint_stream(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_checkpoint_stream(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_string(out, ckpt.stage);
  put_string(out, ckpt.spec.name);
  put_i32(out, ckpt.spec.input_size);
  put_u32(out, static_cast<uint32_t>(ckpt.spec.block_channel_plan.size()));
  for (const auto& block : ckpt.spec.block_channel_plan) {
    put_u32(out, static_cast<uint32_t>(block.size()));
    for (int width : block) put_i32(out, width);
  }
  put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    put_string(out, name);
    put_u32(out, static_cast<uint32_t>(tensor.shape().size()));
    for (int d : tensor.shape()) put_i32(out, d);
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(float)));
  }
  if (!out.good()) throw IoError("failed while writing checkpoint stream");
}

Checkpoint load_checkpoint_stream(std::istream& in) {
  char magic[sizeof(kMagic)] = {};
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("stream does not hold a model checkpoint (bad magic)");
  }
  const uint32_t version = get_u32(in, "version");
  if (version != kVersion) {
    throw IoError("checkpoint has unsupported version " + std::to_string(version) +
                  " (expected " + std::to_string(kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.stage = get_string(in, "stage");
  ckpt.spec.name = get_string(in, "backbone name");
  ckpt.spec.input_size = get_i32(in, "input_size");
  const uint32_t n_blocks = get_u32(in, "block count");
  if (n_blocks > 64) throw IoError("implausible block count in checkpoint");
  ckpt.spec.block_channel_plan.resize(n_blocks);
  for (auto& block : ckpt.spec.block_channel_plan) {
    const uint32_t n_convs = get_u32(in, "conv count");
    if (n_convs > 64) throw IoError("implausible conv count in checkpoint");
    block.resize(n_convs);
    for (int& width : block) width = get_i32(in, "channel width");
  }
  const uint32_t n_tensors = get_u32(in, "tensor count");
  if (n_tensors > (1u << 16)) throw IoError("implausible tensor count in checkpoint");
  ckpt.tensors.reserve(n_tensors);
  for (uint32_t t = 0; t < n_tensors; ++t) {
    std::string name = get_string(in, "tensor name");
    const uint32_t ndim = get_u32(in, "tensor rank");
    if (ndim > 8) throw IoError("implausible tensor rank in checkpoint");
    std::vector<int> shape(ndim);
    size_t count = 1;
    for (int& d : shape) {
      d = get_i32(in, "tensor dim");
      if (d <= 0) throw IoError("non-positive tensor dimension in checkpoint");
      count *= static_cast<size_t>(d);
    }
    Tensor tensor(shape);
    if (!in.read(reinterpret_cast<char*>(tensor.data()),
                 static_cast<std::streamsize>(count * sizeof(float)))) {
      throw IoError("checkpoint truncated while reading tensor '" + name + "'");
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(tensor));
  }
  return ckpt;
}

}  // namespace ikdmil
