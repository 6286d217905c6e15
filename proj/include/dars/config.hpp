#ifndef DARS_CONFIG_HPP
#define DARS_CONFIG_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dars::config {

// Flat view of a TOML-style document: `[section]` headers prefix the keys that
// follow ("section.key"). Values are scalars, quoted strings, or [a, b] lists.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& content);
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long get_int(const std::string& key, long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& key, std::vector<std::string> fallback) const;

    // Keys that were never read through a getter.
    std::vector<std::string> unused_keys() const;
    std::string serialize() const;
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::optional<std::string> raw(const std::string& key) const;

    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> used_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dars::config

#endif  // DARS_CONFIG_HPP
