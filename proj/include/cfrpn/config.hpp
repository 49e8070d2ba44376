#pragma once

// Flat `key = value` configuration with dotted namespaces. Lines starting with '#' are
// comments; later assignments override earlier ones.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfrpn {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class FlatConfig {
public:
    static FlatConfig parse(const std::string& text, const std::string& source = "config");
    static FlatConfig load(const std::filesystem::path& path);

    /// Applies one `key=value` override.
    void apply_override(const std::string& assignment);
    void set(const std::string& key, const std::string& value);

    bool contains(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> find(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    /// Comma-separated list of unsigned integers.
    std::vector<std::uint64_t> get_u64_list(const std::string& key, const std::vector<std::uint64_t>& fallback) const;

    /// Throws ConfigError naming the first key not in `known`.
    void require_known(std::span<const std::string> known) const;

    const std::map<std::string, std::string>& values() const noexcept { return values_; }
    /// Canonical text: sorted `key = value` lines.
    std::string canonical() const;

private:
    std::map<std::string, std::string> values_;
};

std::vector<std::uint64_t> parse_u64_list(const std::string& text, const std::string& what);

}  // namespace cfrpn
