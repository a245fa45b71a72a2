#include "quicknat/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "quicknat/fileio.hpp"

namespace quicknat {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host byte order");

namespace {

constexpr std::string_view kMagic = "QNATCKPT 1";
constexpr std::string_view kEnd = "END\n";

template <typename T>
constexpr std::string_view dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("checkpoint " + path.string() + ": bad number '" + s + "'");
  }
  return v;
}

struct Entry {
  std::string dtype;
  std::size_t offset = 0;
  Shape shape;
};

template <typename T>
void append_tensor(std::ostringstream& manifest, std::string& blob, const std::string& name, const Tensor<T>& t) {
  manifest << "tensor " << name << ' ' << dtype_name<T>() << ' ' << blob.size();
  for (Index d : t.shape()) manifest << ' ' << d;
  manifest << '\n';
  blob.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(T));
}

template <typename S, typename T>
void copy_from_blob(const std::string& blob, const Entry& e, Tensor<T>& out) {
  const std::size_t n = static_cast<std::size_t>(out.size());
  std::vector<S> raw(n);
  std::memcpy(raw.data(), blob.data() + e.offset, n * sizeof(S));
  for (std::size_t i = 0; i < n; ++i) out[static_cast<Index>(i)] = static_cast<T>(raw[i]);
}

template <typename T>
void read_tensor(const std::map<std::string, Entry>& entries, const std::string& blob, const std::string& name,
                 Tensor<T>& out, const std::filesystem::path& path) {
  const auto it = entries.find(name);
  if (it == entries.end()) throw DataError("checkpoint " + path.string() + " lacks tensor " + name);
  const Entry& e = it->second;
  if (e.shape != out.shape()) {
    throw DataError("checkpoint " + path.string() + ": tensor " + name + " has shape " + to_string(e.shape) +
                    ", expected " + to_string(out.shape()));
  }
  const std::size_t width = e.dtype == "float32" ? 4 : e.dtype == "float64" ? 8 : 0;
  if (width == 0) throw DataError("checkpoint " + path.string() + ": unsupported dtype " + e.dtype);
  if (e.offset + static_cast<std::size_t>(out.size()) * width > blob.size()) {
    throw DataError("checkpoint " + path.string() + " is truncated at tensor " + name);
  }
  if (width == 4) {
    copy_from_blob<float>(blob, e, out);
  } else {
    copy_from_blob<double>(blob, e, out);
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
  NetworkParameters<T> params = ckpt.params;
  std::ostringstream manifest;
  std::string blob;
  const NetworkConfig& c = params.config;
  manifest << kMagic << '\n';
  manifest << "config view " << to_string(ckpt.view) << '\n';
  manifest << "config in_channels " << c.in_channels << '\n';
  manifest << "config width " << c.width << '\n';
  manifest << "config kernel " << c.kernel << '\n';
  manifest << "config num_classes " << c.num_classes << '\n';
  for (const auto& [key, value] : ckpt.meta) {
    if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint meta key '" + key + "' or its value contains whitespace/newlines");
    }
    manifest << "meta " << key << ' ' << value << '\n';
  }
  std::vector<std::string> names;
  params.visit([&](const std::string& name, Parameter<T>& p) {
    append_tensor(manifest, blob, name, p.value);
    names.push_back(name);
  });
  params.visit_buffers([&](const std::string& name, Tensor<T>& t) { append_tensor(manifest, blob, name, t); });
  if (ckpt.optimizer) {
    const OptimizerState<T>& opt = *ckpt.optimizer;
    manifest << "optimizer " << format_double(opt.momentum) << ' ' << format_double(opt.weight_decay) << ' '
             << format_double(opt.learning_rate) << ' ' << (opt.velocity.empty() ? 0 : 1) << '\n';
    if (!opt.velocity.empty()) {
      if (opt.velocity.size() != names.size()) {
        throw std::invalid_argument("checkpoint: optimizer state does not match the parameter list");
      }
      for (std::size_t i = 0; i < names.size(); ++i) {
        append_tensor(manifest, blob, "velocity." + names[i], opt.velocity[i]);
      }
    }
  }
  manifest << kEnd;
  const std::string header = manifest.str();
  atomic_write(path, [&](std::ostream& os) {
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  });
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) {
    throw DataError(path.string() + " is not a QuickNAT checkpoint (bad magic)");
  }
  const std::size_t end = bytes.find(std::string("\n") + std::string(kEnd));
  if (end == std::string::npos) throw DataError("checkpoint " + path.string() + " has no manifest terminator");
  const std::string blob = bytes.substr(end + 1 + kEnd.size());
  std::istringstream in(bytes.substr(0, end));
  std::string line;
  std::getline(in, line);

  Checkpoint<T> out;
  NetworkConfig config{0, 0, 0, 0};
  std::map<std::string, Entry> entries;
  bool has_optimizer = false, has_velocity = false;
  OptimizerState<T> opt;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind, key;
    ls >> kind >> key;
    if (kind == "config") {
      std::string value;
      ls >> value;
      if (key == "view") {
        out.view = parse_view(value);
      } else {
        const Index v = static_cast<Index>(parse_double(value, path));
        if (key == "in_channels") config.in_channels = v;
        else if (key == "width") config.width = v;
        else if (key == "kernel") config.kernel = v;
        else if (key == "num_classes") config.num_classes = v;
        else throw DataError("checkpoint " + path.string() + ": unknown config key " + key);
      }
    } else if (kind == "meta") {
      std::string value;
      std::getline(ls >> std::ws, value);
      out.meta[key] = value;
    } else if (kind == "tensor") {
      Entry e;
      ls >> e.dtype >> e.offset;
      Index d = 0;
      while (ls >> d) e.shape.push_back(d);
      if (!ls.eof()) throw DataError("checkpoint " + path.string() + ": malformed line '" + line + "'");
      entries[key] = std::move(e);
    } else if (kind == "optimizer") {
      std::string wd, lr;
      int velocity = 0;
      ls >> wd >> lr >> velocity;
      opt.momentum = parse_double(key, path);
      opt.weight_decay = parse_double(wd, path);
      opt.learning_rate = parse_double(lr, path);
      has_optimizer = true;
      has_velocity = velocity != 0;
    } else if (!kind.empty()) {
      throw DataError("checkpoint " + path.string() + ": malformed line '" + line + "'");
    }
  }
  if (config.in_channels <= 0 || config.width <= 0 || config.kernel <= 0 || config.num_classes <= 0) {
    throw DataError("checkpoint " + path.string() + " lacks a complete network configuration");
  }
  out.params = NetworkParameters<T>::allocate(config);
  out.params.visit([&](const std::string& name, Parameter<T>& p) {
    read_tensor(entries, blob, name, p.value, path);
    if (has_velocity) {
      opt.velocity.push_back(Tensor<T>::zeros_like(p.value));
      read_tensor(entries, blob, "velocity." + name, opt.velocity.back(), path);
    }
  });
  out.params.visit_buffers([&](const std::string& name, Tensor<T>& t) { read_tensor(entries, blob, name, t, path); });
  if (has_optimizer) out.optimizer = std::move(opt);
  return out;
}

template void save_checkpoint<float>(const Checkpoint<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Checkpoint<double>&, const std::filesystem::path&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace quicknat
