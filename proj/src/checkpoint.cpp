#include "yolco/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace yolco {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated archive");
  return v;
}

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& model_config,
                     const NamedParameters<T>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  const nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                                 {"model_config", model_config}};
  const std::string text = header.dump();
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_u64(os, tensors.size());
  std::vector<float> buffer;
  for (const auto& [name, tensor] : tensors) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, tensor.shape().size());
    for (auto e : tensor.shape()) write_u64(os, static_cast<std::uint64_t>(e));
    buffer.assign(tensor.data().begin(), tensor.data().end());
    os.write(reinterpret_cast<const char*>(buffer.data()),
             static_cast<std::streamsize>(buffer.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  Checkpoint out;
  const auto header_len = read_u64(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  if (header.value("format_version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format_version");
  }
  out.model_config = header.at("model_config");
  const auto count = read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(read_u64(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(read_u64(is));
    for (auto& e : shape) e = static_cast<std::int64_t>(read_u64(is));
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor '" + name + "'");
    out.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

template <typename T>
void assign_parameters(const Checkpoint& checkpoint, NamedParameters<T>& params) {
  for (auto& [name, param] : params) {
    const auto& src = checkpoint.at(name);
    if (src.shape() != param.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                               shape_str(src.shape()) + ", model expects " +
                               shape_str(param.shape()));
    }
    auto dst = param.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.data()[i]);
  }
}

template void save_checkpoint<float>(const std::filesystem::path&, const nlohmann::json&,
                                     const NamedParameters<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const nlohmann::json&,
                                      const NamedParameters<double>&);
template void assign_parameters<float>(const Checkpoint&, NamedParameters<float>&);
template void assign_parameters<double>(const Checkpoint&, NamedParameters<double>&);

}  // namespace yolco
