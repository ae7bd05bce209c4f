#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cashewmap/common.hpp"

namespace cashewmap {

// Line-oriented key=value config with [section] headers. Keys are stored as
// "section.key"; keys before any section header keep their bare name.
class Config {
public:
    static Config parse(std::istream& in, const std::string& origin) {
        Config cfg;
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section");
                section = trim(line.substr(1, line.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
                continue;
            }
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            if (!section.empty()) key = section + "." + key;
            cfg.kv_[key] = value;
        }
        return cfg;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw InputError("cannot open config: " + path);
        return parse(in, path);
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    std::string require(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing config key: " + key);
        return it->second;
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + " is not an integer: " + it->second);
        }
    }

    double get_f64(const std::string& key, double fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + " is not a number: " + it->second);
        }
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

    // Order-independent content hash over resolved entries.
    std::uint64_t content_hash() const {
        std::uint64_t h = 14695981039346656037ull;
        for (const auto& [k, v] : kv_) {
            h = fnv1a(k.data(), k.size(), h);
            h = fnv1a("=", 1, h);
            h = fnv1a(v.data(), v.size(), h);
            h = fnv1a("\n", 1, h);
        }
        return h;
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> kv_;
};

inline std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open input: " + path);
    std::uint64_t h = 14695981039346656037ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

// Deterministic provenance sidecar written next to every artifact.
class Provenance {
public:
    Provenance(std::string command, std::uint64_t seed) : seed_(seed) {
        j_["command"] = std::move(command);
        j_["seed"] = seed_;
        j_["inputs"] = nlohmann::json::object();
    }

    void set_config(const Config& cfg) { j_["config_hash"] = hex64(cfg.content_hash()); }
    void add_input(const std::string& path) { j_["inputs"][path] = hex64(file_hash(path)); }
    void add_note(const std::string& key, nlohmann::json value) { j_[key] = std::move(value); }

    void write(const std::string& artifact_path) const {
        const std::string path = artifact_path + ".provenance.json";
        std::ofstream out(path);
        if (!out) throw InputError("cannot write provenance: " + path);
        out << j_.dump(2) << "\n";
    }

    const nlohmann::json& json() const { return j_; }

private:
    std::uint64_t seed_;
    nlohmann::json j_;
};

}  // namespace cashewmap
