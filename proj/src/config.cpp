#include "cfrpn/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cfrpn {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
    if (k.empty() || k.front() == '.' || k.back() == '.') return false;
    return std::all_of(k.begin(), k.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
    });
}

std::uint64_t to_u64(const std::string& text, const std::string& what) {
    const std::string t = trim(text);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size()) {
        throw ConfigError(what + ": expected a non-negative integer, got '" + text + "'");
    }
    return v;
}

}  // namespace

FlatConfig FlatConfig::parse(const std::string& text, const std::string& source) {
    FlatConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(t.substr(0, eq));
        if (!valid_key(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": invalid key '" + key + "'");
        c.values_[key] = trim(t.substr(eq + 1));
    }
    return c;
}

FlatConfig FlatConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

void FlatConfig::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void FlatConfig::set(const std::string& key, const std::string& value) {
    if (!valid_key(key)) throw ConfigError("invalid config key '" + key + "'");
    values_[key] = value;
}

std::optional<std::string> FlatConfig::find(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

std::string FlatConfig::get_string(const std::string& key, const std::string& fallback) const {
    return find(key).value_or(fallback);
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    const char* b = v->c_str();
    char* end = nullptr;
    errno = 0;
    const double d = std::strtod(b, &end);
    if (v->empty() || end != b + v->size() || errno == ERANGE) {
        throw ConfigError(key + ": expected a number, got '" + *v + "'");
    }
    return d;
}

std::size_t FlatConfig::get_size(const std::string& key, std::size_t fallback) const {
    const auto v = find(key);
    return v ? static_cast<std::size_t>(to_u64(*v, key)) : fallback;
}

std::uint64_t FlatConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto v = find(key);
    return v ? to_u64(*v, key) : fallback;
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + *v + "'");
}

std::vector<std::uint64_t> parse_u64_list(const std::string& text, const std::string& what) {
    std::vector<std::uint64_t> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) out.push_back(to_u64(item, what));
    if (out.empty()) throw ConfigError(what + ": empty list");
    return out;
}

std::vector<std::uint64_t> FlatConfig::get_u64_list(const std::string& key,
                                                    const std::vector<std::uint64_t>& fallback) const {
    const auto v = find(key);
    return v ? parse_u64_list(*v, key) : fallback;
}

void FlatConfig::require_known(std::span<const std::string> known) const {
    for (const auto& [k, v] : values_) {
        if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
    }
}

std::string FlatConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

}  // namespace cfrpn
