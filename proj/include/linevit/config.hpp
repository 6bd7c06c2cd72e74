#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace linevit {

// Plain-text configuration: one `section.key = value` per line, `#` comments.
// Precedence is layered by call order: defaults are baked into the consuming
// structs, a file overrides them via merge_file(), CLI flags override the
// file via set().
class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path);
    void merge_file(const std::string& path);
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const;

    std::string get_str(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    // Comma-separated list of numbers, e.g. "0,0.1,0.2,0.3".
    std::vector<double> get_doubles(const std::string& key,
                                    const std::vector<double>& fallback) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace linevit
