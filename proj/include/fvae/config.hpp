#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fvae {

// Pipeline-level failure with a machine-parsable slug. Exit code 2 is a
// precondition/config failure, 1 a runtime failure.
struct CliError {
    int exit_code;
    std::string slug;
    std::string detail;

    CliError(int code, std::string s, std::string d = "")
        : exit_code(code), slug(std::move(s)), detail(std::move(d)) {}
};

// Line-oriented `key = value` config with dotted section keys. '#' starts a
// comment; later assignments win.
class ConfigMap {
  public:
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key) const;
    int64_t get_i64(const std::string& key) const;
    double get_f64(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    void merge_from(const ConfigMap& other) {
        for (const auto& [k, v] : other.kv_) kv_[k] = v;
    }

    // Parses "key=value" (as passed to --set).
    void apply_override(const std::string& assignment);

    static ConfigMap parse_file(const std::string& path);
    static ConfigMap parse_text(const std::string& text, const std::string& origin = "<text>");

    // Canonical serialization: sorted keys, one `key = value` per line.
    std::string serialize() const;
    void write_file(const std::string& path) const;

    // FNV-1a of the canonical serialization, as fixed-width hex.
    std::string hash() const;

    const std::map<std::string, std::string>& items() const { return kv_; }

  private:
    std::map<std::string, std::string> kv_;
};

// Every key the pipeline reads, with its default. Paper-scale values
// (glow depth 32, prior width 1024, lr 1e-4) are reachable by overriding.
ConfigMap default_config();

// Defaults + optional file + --set overrides, in increasing precedence.
ConfigMap resolve_config(const std::string& config_path, const std::vector<std::string>& overrides);

}  // namespace fvae
