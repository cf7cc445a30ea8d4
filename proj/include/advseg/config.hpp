// Flat "key = value" configuration files with '#' comments.

#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace advseg {

class Config {
public:
    /// Throws std::invalid_argument on a malformed line.
    static Config parse(std::istream& in, std::string_view source = "config");
    static Config load(const std::filesystem::path& path);

    void set(std::string key, std::string value);
    /// "key=value"; later overrides win.
    void apply_override(std::string_view assignment);
    /// Keys of `other` replace ours.
    void merge(const Config& other);

    bool contains(std::string_view key) const;
    std::string get_string(std::string_view key, std::string_view fallback) const;
    double get_double(std::string_view key, double fallback) const;
    std::size_t get_size(std::string_view key, std::size_t fallback) const;
    bool get_bool(std::string_view key, bool fallback) const;
    /// Comma-separated reals.
    std::vector<double> get_doubles(std::string_view key, const std::vector<double>& fallback) const;

    /// Keys not in `known`, in sorted order.
    std::vector<std::string> unknown_keys(const std::vector<std::string_view>& known) const;

    /// Sorted "key = value" lines; parse() reads them back unchanged.
    void write(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;

    const std::map<std::string, std::string, std::less<>>& entries() const { return values_; }

private:
    std::map<std::string, std::string, std::less<>> values_;
};

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace advseg
