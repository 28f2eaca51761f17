#include "ltscg/config.hpp"

#include "ltscg/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <variant>

namespace ltscg::harness {

namespace {

struct VariantInfo {
  Variant tag;
  const char* name;
};

constexpr VariantInfo kVariants[] = {
    {Variant::LtsCg, "ltscg"},
    {Variant::NoGraphLoss, "no_lg"},
    {Variant::PredictOnly, "lpre_only"},
    {Variant::InferOnly, "linf_only"},
    {Variant::OneStepDense, "onestep_dense"},
    {Variant::OneStepSparse, "onestep_sparse"},
    {Variant::DenseAttention, "dense_attention"},
    {Variant::Qmix, "qmix"},
};

using FieldPtr = std::variant<int RunConfig::*, std::int64_t RunConfig::*, std::uint64_t RunConfig::*,
                              double RunConfig::*, bool RunConfig::*, std::string RunConfig::*>;

struct Field {
  const char* key;
  FieldPtr ptr;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"env", &RunConfig::env},
      {"n_agents", &RunConfig::n_agents},
      {"max_steps", &RunConfig::max_steps},
      {"gamma", &RunConfig::gamma},
      {"seed", &RunConfig::seed},
      {"total_steps", &RunConfig::total_steps},
      {"variant", &RunConfig::variant},
      {"workers", &RunConfig::workers},
      {"graph_window", &RunConfig::graph_window},
      {"conv_kernel", &RunConfig::conv_kernel},
      {"conv_channels", &RunConfig::conv_channels},
      {"embedding_dim", &RunConfig::embedding_dim},
      {"pair_hidden", &RunConfig::pair_hidden},
      {"temperature", &RunConfig::temperature},
      {"diffusion_degree", &RunConfig::diffusion_degree},
      {"dcrnn_hidden", &RunConfig::dcrnn_hidden},
      {"gnn_hidden", &RunConfig::gnn_hidden},
      {"rnn_hidden", &RunConfig::rnn_hidden},
      {"message_dim", &RunConfig::message_dim},
      {"mixer_embed", &RunConfig::mixer_embed},
      {"lambda", &RunConfig::lambda},
      {"weight_pre", &RunConfig::weight_pre},
      {"weight_inf", &RunConfig::weight_inf},
      {"learning_rate", &RunConfig::learning_rate},
      {"grad_clip", &RunConfig::grad_clip},
      {"epsilon_start", &RunConfig::epsilon_start},
      {"epsilon_finish", &RunConfig::epsilon_finish},
      {"epsilon_anneal_steps", &RunConfig::epsilon_anneal_steps},
      {"buffer_capacity", &RunConfig::buffer_capacity},
      {"batch_size", &RunConfig::batch_size},
      {"train_every_episodes", &RunConfig::train_every_episodes},
      {"target_update_period", &RunConfig::target_update_period},
      {"graph_refresh_period", &RunConfig::graph_refresh_period},
      {"eval_every_steps", &RunConfig::eval_every_steps},
      {"eval_episodes", &RunConfig::eval_episodes},
      {"log_wallclock", &RunConfig::log_wallclock},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config field '" + key + "': expected an integer, got '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  is.imbue(std::locale::classic());
  double out = 0.0;
  is >> out;
  if (is.fail() || !is.eof() || !std::isfinite(out)) {
    throw ConfigError("config field '" + key + "': expected a real number, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config field '" + key + "': expected true or false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

Variant parse_variant(const std::string& name) {
  for (const auto& v : kVariants) {
    if (name == v.name) return v.tag;
  }
  std::string known;
  for (const auto& v : kVariants) known += std::string(known.empty() ? "" : ", ") + v.name;
  throw ConfigError("unknown variant '" + name + "' (expected one of: " + known + ")");
}

std::string variant_name(Variant v) {
  for (const auto& info : kVariants) {
    if (info.tag == v) return info.name;
  }
  return "?";
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& v : kVariants) out.emplace_back(v.name);
    return out;
  }();
  return names;
}

bool uses_trajectory_graph(Variant v) {
  switch (v) {
    case Variant::LtsCg:
    case Variant::NoGraphLoss:
    case Variant::PredictOnly:
    case Variant::InferOnly:
    case Variant::DenseAttention:
      return true;
    default:
      return false;
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key != f.key) continue;
    std::visit(
        [&](auto ptr) {
          using T = std::remove_cvref_t<decltype(this->*ptr)>;
          if constexpr (std::is_same_v<T, std::string>) {
            this->*ptr = value;
          } else if constexpr (std::is_same_v<T, bool>) {
            this->*ptr = parse_bool(key, value);
          } else if constexpr (std::is_same_v<T, double>) {
            this->*ptr = parse_double(key, value);
          } else {
            this->*ptr = parse_integer<T>(key, value);
          }
        },
        f.ptr);
    return;
  }
  throw ConfigError("unknown config field '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  for (const auto& f : fields()) {
    os << f.key << " = ";
    std::visit(
        [&](auto ptr) {
          using T = std::remove_cvref_t<decltype(this->*ptr)>;
          if constexpr (std::is_same_v<T, double>) {
            os << format_double(this->*ptr);
          } else if constexpr (std::is_same_v<T, bool>) {
            os << (this->*ptr ? "true" : "false");
          } else {
            os << this->*ptr;
          }
        },
        f.ptr);
    os << '\n';
  }
  return os.str();
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError("config field '" + field + "': " + what);
  };
  require(env == "gather" || env == "tag", "env", "expected gather or tag");
  require(n_agents >= 1, "n_agents", "must be >= 1");
  require(max_steps >= 0, "max_steps", "must be >= 0");
  require(gamma >= 0.0 && gamma < 1.0, "gamma", "must lie in [0, 1)");
  require(total_steps >= 0, "total_steps", "must be >= 0");
  parse_variant(variant);
  require(workers >= 1, "workers", "must be >= 1");
  require(conv_kernel >= 1, "conv_kernel", "must be >= 1");
  require(graph_window >= conv_kernel, "graph_window", "must be >= conv_kernel");
  require(conv_channels >= 1, "conv_channels", "must be >= 1");
  require(embedding_dim >= 1, "embedding_dim", "must be >= 1");
  require(pair_hidden >= 1, "pair_hidden", "must be >= 1");
  require(temperature > 0.0, "temperature", "must be > 0");
  require(diffusion_degree >= 0, "diffusion_degree", "must be >= 0");
  require(dcrnn_hidden >= 1, "dcrnn_hidden", "must be >= 1");
  require(gnn_hidden >= 1, "gnn_hidden", "must be >= 1");
  require(rnn_hidden >= 1, "rnn_hidden", "must be >= 1");
  require(message_dim == gnn_hidden, "message_dim", "must equal gnn_hidden (messages are GCN node rows)");
  require(mixer_embed >= 1, "mixer_embed", "must be >= 1");
  require(lambda >= 0.0, "lambda", "must be >= 0");
  require(weight_pre >= 0.0, "weight_pre", "must be >= 0");
  require(weight_inf >= 0.0, "weight_inf", "must be >= 0");
  require(learning_rate > 0.0, "learning_rate", "must be > 0");
  require(grad_clip >= 0.0, "grad_clip", "must be >= 0");
  require(epsilon_start >= 0.0 && epsilon_start <= 1.0, "epsilon_start", "must lie in [0, 1]");
  require(epsilon_finish >= 0.0 && epsilon_finish <= 1.0, "epsilon_finish", "must lie in [0, 1]");
  require(epsilon_anneal_steps >= 0, "epsilon_anneal_steps", "must be >= 0");
  require(buffer_capacity >= 1, "buffer_capacity", "must be >= 1");
  require(batch_size >= 1 && batch_size <= buffer_capacity, "batch_size", "must lie in [1, buffer_capacity]");
  require(train_every_episodes >= 1, "train_every_episodes", "must be >= 1");
  require(target_update_period >= 1, "target_update_period", "must be >= 1");
  require(graph_refresh_period >= 1, "graph_refresh_period", "must be >= 1");
  require(eval_every_steps >= 1, "eval_every_steps", "must be >= 1");
  require(eval_episodes >= 1, "eval_episodes", "must be >= 1");
}

double RunConfig::effective_lambda() const {
  switch (variant_tag()) {
    case Variant::OneStepDense:
    case Variant::OneStepSparse:
    case Variant::Qmix:
      return 0.0;
    default:
      return lambda;
  }
}

double RunConfig::effective_weight_pre() const {
  switch (variant_tag()) {
    case Variant::NoGraphLoss:
    case Variant::InferOnly:
      return 0.0;
    default:
      return weight_pre;
  }
}

double RunConfig::effective_weight_inf() const {
  switch (variant_tag()) {
    case Variant::NoGraphLoss:
    case Variant::PredictOnly:
      return 0.0;
    default:
      return weight_inf;
  }
}

}  // namespace ltscg::harness
