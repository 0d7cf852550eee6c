#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cleansift {

// Raised for malformed configs / missing keys; the CLI maps it to exit 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat `section.key = value` file. '#' starts a comment; blank lines ignored.
class ExperimentConfig {
  public:
    ExperimentConfig() = default;

    static ExperimentConfig parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("config: cannot open " + path);
        ExperimentConfig cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trimmed = trim(line);
            if (trimmed.empty()) continue;
            auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: line " + std::to_string(lineno) +
                                  " is not `key = value`: " + trimmed);
            std::string key = trim(trimmed.substr(0, eq));
            std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config: empty key at line " + std::to_string(lineno));
            if (cfg.values_.count(key))
                throw ConfigError("config: duplicate key `" + key + "` at line " +
                                  std::to_string(lineno));
            cfg.values_[key] = value;
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("config: missing required key `" + key + "`");
        return it->second;
    }
    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    long long get_int(const std::string& key) const { return to_int(key, get_str(key)); }
    long long get_int(const std::string& key, long long fallback) const {
        return has(key) ? to_int(key, get_str(key)) : fallback;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        try {
            return std::stoull(get_str(key));
        } catch (const std::exception&) {
            throw ConfigError("config: key `" + key + "` is not an unsigned integer");
        }
    }

    double get_double(const std::string& key) const { return to_double(key, get_str(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? to_double(key, get_str(key)) : fallback;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        std::string v = get_str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config: key `" + key + "` is not a boolean: " + v);
    }

    // comma-separated list
    std::vector<std::string> get_list(const std::string& key,
                                      const std::vector<std::string>& fallback) const {
        if (!has(key)) return fallback;
        std::vector<std::string> out;
        std::istringstream ss(get_str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            auto t = trim(item);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    // Rejects any key that is not in the allowed set.
    void reject_unknown(const std::set<std::string>& allowed) const {
        for (const auto& [key, value] : values_)
            if (!allowed.count(key)) throw ConfigError("config: unknown key `" + key + "`");
    }

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    static std::string trim(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    static long long to_int(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            long long x = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw ConfigError("config: key `" + key + "` is not an integer: " + v);
        }
    }
    static double to_double(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            double x = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw ConfigError("config: key `" + key + "` is not a number: " + v);
        }
    }

    std::map<std::string, std::string> values_;
};

}  // namespace cleansift
