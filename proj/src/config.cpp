#include "quicknat/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "quicknat/fileio.hpp"

namespace quicknat {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) throw std::invalid_argument(value);
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double positive(double v) {
  if (!(v > 0.0)) throw std::invalid_argument("must be positive");
  return v;
}

Index at_least(Index v, Index lo) {
  if (v < lo) throw std::invalid_argument("must be at least " + std::to_string(lo));
  return v;
}

double unit_interval(double v, double hi) {
  if (!(v >= 0.0 && v <= hi)) throw std::invalid_argument("must lie in [0, " + format_number(hi) + "]");
  return v;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::filesystem::path&)>;

std::filesystem::path resolve(const std::string& value, const std::filesystem::path& base) {
  const std::filesystem::path p(value);
  return p.is_absolute() || base.empty() ? p : base / p;
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, const std::string& v, auto&) { c.train.seed = parse_number<std::uint64_t>(v); }},
      {"view", [](RunConfig& c, const std::string& v, auto&) { c.train.view = parse_view(v); }},
      {"lr", [](RunConfig& c, const std::string& v, auto&) { c.train.schedule.initial_lr = positive(parse_number<double>(v)); }},
      {"batch", [](RunConfig& c, const std::string& v, auto&) { c.train.batch_size = at_least(parse_number<Index>(v), 1); }},
      {"patience", [](RunConfig& c, const std::string& v, auto&) { c.train.schedule.patience = static_cast<int>(at_least(parse_number<Index>(v), 1)); }},
      {"max_epochs", [](RunConfig& c, const std::string& v, auto&) { c.train.schedule.max_epochs = static_cast<int>(at_least(parse_number<Index>(v), 1)); }},
      {"decay_period", [](RunConfig& c, const std::string& v, auto&) { c.train.schedule.decay_period = static_cast<int>(at_least(parse_number<Index>(v), 1)); }},
      {"decay_factor", [](RunConfig& c, const std::string& v, auto&) { c.train.schedule.decay_factor = positive(parse_number<double>(v)); }},
      {"min_improvement", [](RunConfig& c, const std::string& v, auto&) { c.train.schedule.min_relative_improvement = unit_interval(parse_number<double>(v), 1.0); }},
      {"momentum", [](RunConfig& c, const std::string& v, auto&) { c.train.momentum = unit_interval(parse_number<double>(v), 0.999999); }},
      {"weight_decay", [](RunConfig& c, const std::string& v, auto&) { c.train.weight_decay = unit_interval(parse_number<double>(v), 1.0); }},
      {"out", [](RunConfig& c, const std::string& v, auto& base) { c.out_dir = resolve(v, base); }},
      {"init", [](RunConfig& c, const std::string& v, auto& base) { c.init = resolve(v, base); }},
      {"precision", [](RunConfig& c, const std::string& v, auto&) {
         if (v != "float32" && v != "float64") throw std::invalid_argument("expected float32 or float64");
         c.float64 = v == "float64";
       }},
      {"width", [](RunConfig& c, const std::string& v, auto&) { c.width = at_least(parse_number<Index>(v), 1); }},
      {"classes", [](RunConfig& c, const std::string& v, auto&) { c.classes = at_least(parse_number<Index>(v), 2); }},
      {"phantom_size", [](RunConfig& c, const std::string& v, auto&) { c.phantom.size = at_least(parse_number<Index>(v), 16); }},
      {"noise_sd", [](RunConfig& c, const std::string& v, auto&) { c.phantom.noise_sd = unit_interval(parse_number<double>(v), 10.0); }},
      {"gain_jitter", [](RunConfig& c, const std::string& v, auto&) { c.phantom.gain_jitter = unit_interval(parse_number<double>(v), 0.9); }},
      {"contrast_jitter", [](RunConfig& c, const std::string& v, auto&) { c.phantom.contrast_jitter = unit_interval(parse_number<double>(v), 0.9); }},
      {"bias_field", [](RunConfig& c, const std::string& v, auto&) { c.phantom.bias_field = unit_interval(parse_number<double>(v), 0.9); }},
      {"train_phantoms", [](RunConfig& c, const std::string& v, auto&) { c.train_phantoms = at_least(parse_number<Index>(v), 1); }},
      {"val_phantoms", [](RunConfig& c, const std::string& v, auto&) { c.val_phantoms = at_least(parse_number<Index>(v), 1); }},
      {"data_seed", [](RunConfig& c, const std::string& v, auto&) { c.data_seed = parse_number<std::uint64_t>(v); }},
      {"corruption_rate", [](RunConfig& c, const std::string& v, auto&) { c.corruption_rate = unit_interval(parse_number<double>(v), 0.5); }},
  };
  return table;
}

}  // namespace

RunConfig default_run_config(Stage stage) {
  RunConfig c;
  c.train.schedule = stage == Stage::pretrain ? Schedule::pretrain() : Schedule::finetune();
  c.train.batch_size = 2;
  c.phantom.size = 32;
  return c;
}

RunConfig parse_run_config(const std::string& text, Stage stage, const std::filesystem::path& base_dir) {
  RunConfig c = default_run_config(stage);
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no) + " '" + trim(raw) + "'";
    if (eq == std::string::npos) throw DataError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "stage") {
      if (parse_stage(value) != stage) {
        throw DataError(where + ": stage does not match the command (" + std::string(to_string(stage)) + ")");
      }
      continue;
    }
    const auto it = setters().find(key);
    if (it == setters().end()) throw DataError(where + ": unknown key '" + key + "'");
    try {
      it->second(c, value, base_dir);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      throw DataError(where + ": invalid value for '" + key + "' (" + e.what() + ")");
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, Stage stage) {
  return parse_run_config(read_text_file(path), stage, path.parent_path());
}

std::string to_text(const RunConfig& c) {
  const Schedule& s = c.train.schedule;
  std::ostringstream out;
  auto kv = [&](const char* key, const std::string& value) { out << key << " = " << value << '\n'; };
  kv("stage", std::string(to_string(s.stage)));
  kv("seed", format_number(c.train.seed));
  kv("view", std::string(to_string(c.train.view)));
  kv("lr", format_number(c.train.learning_rate.value_or(s.initial_lr)));
  kv("batch", format_number(c.train.batch_size));
  kv("patience", format_number(s.patience));
  kv("max_epochs", format_number(s.max_epochs));
  kv("decay_period", format_number(s.decay_period));
  kv("decay_factor", format_number(s.decay_factor));
  kv("min_improvement", format_number(s.min_relative_improvement));
  kv("momentum", format_number(c.train.momentum));
  kv("weight_decay", format_number(c.train.weight_decay));
  kv("width", format_number(c.width));
  kv("classes", format_number(c.classes));
  kv("phantom_size", format_number(c.phantom.size));
  kv("noise_sd", format_number(c.phantom.noise_sd));
  kv("gain_jitter", format_number(c.phantom.gain_jitter));
  kv("contrast_jitter", format_number(c.phantom.contrast_jitter));
  kv("bias_field", format_number(c.phantom.bias_field));
  kv("train_phantoms", format_number(c.train_phantoms));
  kv("val_phantoms", format_number(c.val_phantoms));
  kv("data_seed", format_number(c.data_seed));
  kv("corruption_rate", format_number(c.corruption_rate));
  kv("precision", c.float64 ? "float64" : "float32");
  if (!c.out_dir.empty()) kv("out", c.out_dir.string());
  if (!c.init.empty()) kv("init", c.init.string());
  return out.str();
}

}  // namespace quicknat
