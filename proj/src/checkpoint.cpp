#include "polynext/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "polynext/config.hpp"

namespace polynext {

namespace {

constexpr char kMagic[8] = {'P', 'N', 'X', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<char*>(b), 4);
}

void put_u64(std::ostream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<char*>(b), 8);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_f32(std::ostream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  check(in.gcount() == 4, "checkpoint: truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  check(in.gcount() == 8, "checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string get_string(std::istream& in) {
  uint64_t n = get_u64(in);
  check(n < (1ULL << 32), "checkpoint: implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  check(static_cast<uint64_t>(in.gcount()) == n, "checkpoint: truncated string");
  return s;
}

float get_f32(std::istream& in) {
  uint32_t bits = get_u32(in);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::vector<std::pair<std::string, Tensor*>> all_tensors(PolyNeXtModel& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& p : model.parameters()) out.emplace_back(p.name, p.tensor);
  for (auto& b : model.buffers()) out.emplace_back(b.name, b.tensor);
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, PolyNeXtModel& model, const std::string& recipe_json,
                     int64_t epoch, const std::string& rng_state) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_string(out, model_config_to_json(model.config));
  put_string(out, recipe_json);
  put_u64(out, static_cast<uint64_t>(epoch));
  put_string(out, rng_state);
  auto tensors = all_tensors(model);
  put_u64(out, tensors.size());
  for (auto& [name, tensor] : tensors) {
    put_string(out, name);
    put_u32(out, static_cast<uint32_t>(tensor->rank()));
    for (int64_t d = 0; d < tensor->rank(); ++d) put_u64(out, static_cast<uint64_t>(tensor->dim(d)));
    for (int64_t i = 0; i < tensor->numel(); ++i) put_f32(out, static_cast<float>((*tensor)[i]));
  }
  check(out.good(), "checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  check(in.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0, "checkpoint: bad magic in '" + path + "'");
  uint32_t version = get_u32(in);
  check(version == kVersion, "checkpoint: unsupported version " + std::to_string(version));
  std::string config_json = get_string(in);
  LoadedCheckpoint result;
  result.recipe_json = get_string(in);
  result.epoch = static_cast<int64_t>(get_u64(in));
  result.rng_state = get_string(in);

  ModelConfig cfg = parse_model_config(config_json);
  result.model = PolyNeXtModel::build(cfg, 0);

  auto tensors = all_tensors(result.model);
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& [name, tensor] : tensors) by_name[name] = tensor;

  uint64_t count = get_u64(in);
  check(count == tensors.size(), "checkpoint: tensor count " + std::to_string(count) +
                                     " does not match model layout (" + std::to_string(tensors.size()) + ")");
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(in);
    auto it = by_name.find(name);
    check(it != by_name.end(), "checkpoint: unknown tensor '" + name + "'");
    uint32_t rank = get_u32(in);
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int64_t>(get_u64(in)));
    check(shape == it->second->shape(), "checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                                            ", expected " + shape_str(it->second->shape()));
    for (int64_t k = 0; k < it->second->numel(); ++k) (*it->second)[k] = static_cast<double>(get_f32(in));
  }
  return result;
}

}  // namespace polynext
