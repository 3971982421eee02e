#include "mft/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mft/error.hpp"

namespace mft {

namespace {

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

Shape parse_shape(const std::string& text, const std::string& where) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      const auto d = std::stoull(part, &used);
      if (used != part.size() || d == 0) throw std::invalid_argument(part);
      shape.push_back(d);
    } catch (const std::exception&) {
      throw IoError("malformed shape '" + text + "' in " + where);
    }
  }
  if (shape.empty()) throw IoError("empty shape in " + where);
  return shape;
}

}  // namespace

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest) {
  return std::filesystem::path(manifest.string() + ".bin");
}

void save_checkpoint(const std::filesystem::path& manifest, std::span<const NamedTensor> tensors) {
  std::ostringstream text;
  text << kCheckpointHeader << '\n';
  std::string blob;
  for (const auto& nt : tensors) {
    if (nt.name.empty() || nt.name.find_first_of(" \t\n") != std::string::npos)
      throw ContractError("checkpoint tensor name '" + nt.name + "' must be non-empty without whitespace");
    const auto& shape = nt.tensor.shape();
    text << nt.name << " f32 ";
    for (std::size_t i = 0; i < shape.size(); ++i) text << (i ? "x" : "") << shape[i];
    text << ' ' << blob.size() << '\n';
    for (float v : nt.tensor.data()) {
      std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(v));
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      blob.append(bytes, 4);
    }
  }
  {
    std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint manifest " + manifest.string());
    out << text.str();
    if (!out) throw IoError("failed writing " + manifest.string());
  }
  const auto blob_path = checkpoint_blob_path(manifest);
  std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint blob " + blob_path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("failed writing " + blob_path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open checkpoint manifest " + manifest.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointHeader)
    throw IoError(manifest.string() + ": missing '" + kCheckpointHeader + "' header");

  const auto blob_path = checkpoint_blob_path(manifest);
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw IoError("cannot open checkpoint blob " + blob_path.string());
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  std::vector<NamedTensor> result;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest.string() + ":" + std::to_string(line_no);
    std::istringstream fields(line);
    std::string name, dtype, shape_text;
    std::size_t offset = 0;
    if (!(fields >> name >> dtype >> shape_text >> offset)) throw IoError("malformed manifest line " + where);
    if (dtype != "f32") throw IoError("unsupported dtype '" + dtype + "' at " + where);
    Shape shape = parse_shape(shape_text, where);
    const std::size_t n = shape_numel(shape);
    if (offset + n * 4 > blob.size()) throw IoError("tensor '" + name + "' overruns blob " + blob_path.string());
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + offset + 4 * i, 4);
      values[i] = std::bit_cast<float>(to_little(bits));
    }
    result.push_back({name, Tensor::from(std::move(shape), std::move(values))});
  }
  return result;
}

const Tensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name) {
  for (const auto& nt : tensors)
    if (nt.name == name) return nt.tensor;
  throw IoError("checkpoint has no tensor named '" + name + "'");
}

}  // namespace mft
