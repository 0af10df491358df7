#include "fvae/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fvae {

namespace {

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::string ConfigMap::get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw CliError(2, "config-key-missing", key);
    return it->second;
}

int64_t ConfigMap::get_i64(const std::string& key) const {
    const std::string v = get_str(key);
    try {
        size_t pos = 0;
        const int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw CliError(2, "config-bad-integer", key + "=" + v);
    }
}

double ConfigMap::get_f64(const std::string& key) const {
    const std::string v = get_str(key);
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw CliError(2, "config-bad-number", key + "=" + v);
    }
}

bool ConfigMap::get_bool(const std::string& key) const {
    const std::string v = get_str(key);
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw CliError(2, "config-bad-bool", key + "=" + v);
}

void ConfigMap::apply_override(const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw CliError(2, "config-bad-override", assignment + " (expected key=value)");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

ConfigMap ConfigMap::parse_text(const std::string& text, const std::string& origin) {
    ConfigMap m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw CliError(2, "config-parse-failed",
                           origin + ":" + std::to_string(lineno) + " expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw CliError(2, "config-parse-failed",
                           origin + ":" + std::to_string(lineno) + " empty key");
        m.set(key, trim(line.substr(eq + 1)));
    }
    return m;
}

ConfigMap ConfigMap::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw CliError(2, "config-file-missing", path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str(), path);
}

std::string ConfigMap::serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
    return out.str();
}

void ConfigMap::write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out.good()) throw CliError(1, "unwritable-path", path);
    out << serialize();
    if (!out.good()) throw CliError(1, "unwritable-path", path);
}

std::string ConfigMap::hash() const {
    const std::string s = serialize();
    uint64_t h = 14695981039346656037ULL;
    for (const char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ConfigMap default_config() {
    return ConfigMap::parse_text(R"(
seed = 42
precision = f32            # f32 | f64
out = out

data.kind = blobs          # blobs | bars | digits-subset | idx
data.path = _unset_
data.n = 500
data.height = 8
data.width = 8
data.test_frac = 0.2

model.d_z = 16
model.enc_width = 16
model.enc_depth = 1
model.dec_width = 16
model.dec_depth = 1
model.decoder_variance = per_pixel   # per_pixel | scalar
model.prior_depth = 16
model.prior_hidden = 64
model.glow_depth = 8
model.glow_hidden = 48
model.fold = auto          # auto | on | off

train.epochs_phase1 = 200
train.epochs_phase2 = 200
train.batch_size = 50
train.lr = 0.001
train.lr_halve_every = 250
train.n_mc = 1
train.save_every = 1
train.resume = false

sample.n = 64
sample.cols = 8
sample.temperature = 0.5

interpolate.steps = 8
interpolate.temperature = 0.0

eval.n_mc = 64
eval.dequant_seed = 9001
eval.frechet_k = 16
eval.fake_multiplier = 10

compare.epochs = 300
compare.hidden = 64
compare.batch_size = 100
compare.lr = 0.001
)",
                                 "<defaults>");
}

ConfigMap resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    ConfigMap cfg = default_config();
    if (!config_path.empty()) cfg.merge_from(ConfigMap::parse_file(config_path));
    for (const std::string& o : overrides) cfg.apply_override(o);
    return cfg;
}

}  // namespace fvae
