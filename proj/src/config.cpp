#include "advseg/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace advseg {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw std::invalid_argument("config: " + std::string(key) + " = '" + std::string(value) + "' is not " +
                                std::string(expected));
}

double to_double(std::string_view key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "a real number");
    return d;
}

}  // namespace

Config Config::parse(std::istream& in, std::string_view source) {
    Config c;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        const std::string body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(std::string(source) + ":" + std::to_string(number) +
                                        ": expected 'key = value'");
        }
        std::string key = trim(std::string_view(body).substr(0, eq));
        if (key.empty()) {
            throw std::invalid_argument(std::string(source) + ":" + std::to_string(number) + ": empty key");
        }
        c.set(std::move(key), trim(std::string_view(body).substr(eq + 1)));
    }
    return c;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    return parse(in, path.string());
}

void Config::set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }

void Config::apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) {
        throw std::invalid_argument("override '" + std::string(assignment) + "' is not key=value");
    }
    std::string key = trim(assignment.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("override '" + std::string(assignment) + "' has an empty key");
    set(std::move(key), trim(assignment.substr(eq + 1)));
}

void Config::merge(const Config& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
}

bool Config::contains(std::string_view key) const { return values_.find(key) != values_.end(); }

std::string Config::get_string(std::string_view key, std::string_view fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? std::string(fallback) : it->second;
}

double Config::get_double(std::string_view key, double fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : to_double(key, it->second);
}

std::size_t Config::get_size(std::string_view key, std::size_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
    return out;
}

bool Config::get_bool(std::string_view key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, v, "a boolean");
}

std::vector<double> Config::get_doubles(std::string_view key, const std::vector<double>& fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::string_view rest = it->second;
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        out.push_back(to_double(key, trim(rest.substr(0, comma))));
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
    }
    if (out.empty()) bad_value(key, it->second, "a comma-separated list of reals");
    return out;
}

std::vector<std::string> Config::unknown_keys(const std::vector<std::string_view>& known) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
        if (std::find(known.begin(), known.end(), k) == known.end()) out.push_back(k);
    return out;
}

void Config::write(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
}

void Config::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write(out);
    if (!out) throw std::runtime_error("error writing " + path.string());
}

std::string format_double(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

}  // namespace advseg
