#pragma once

// key=value config text: one pair per line, '#' starts a comment,
// blank lines ignored. Order-preserving so resolved configs serialize
// identically across runs.

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "transop/error.hpp"

namespace transop {

class KeyVal {
public:
    void set(const std::string& key, const std::string& value) {
        for (auto& kv : pairs_) {
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        }
        pairs_.emplace_back(key, value);
    }

    bool has(const std::string& key) const {
        for (const auto& kv : pairs_)
            if (kv.first == key) return true;
        return false;
    }

    const std::string& get(const std::string& key) const {
        for (const auto& kv : pairs_)
            if (kv.first == key) return kv.second;
        throw ConfigError("missing config key '" + key + "'");
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        return has(key) ? get(key) : fallback;
    }

    long get_int(const std::string& key) const {
        const std::string& s = get(key);
        size_t pos = 0;
        long v = 0;
        try {
            v = std::stol(s, &pos);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: " + s);
        }
        if (pos != s.size()) throw ConfigError("config key '" + key + "' is not an integer: " + s);
        return v;
    }

    double get_double(const std::string& key) const {
        const std::string& s = get(key);
        size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(s, &pos);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number: " + s);
        }
        if (pos != s.size()) throw ConfigError("config key '" + key + "' is not a number: " + s);
        return v;
    }

    bool get_bool(const std::string& key) const {
        const std::string& s = get(key);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw ConfigError("config key '" + key + "' is not a boolean: " + s);
    }

    const std::vector<std::pair<std::string, std::string>>& pairs() const { return pairs_; }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& kv : pairs_) os << kv.first << "=" << kv.second << "\n";
        return os.str();
    }

    static KeyVal parse(const std::string& text) {
        KeyVal kv;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            size_t a = line.find_first_not_of(" \t\r");
            if (a == std::string::npos) continue;
            size_t b = line.find_last_not_of(" \t\r");
            line = line.substr(a, b - a + 1);
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + line);
            std::string key = line.substr(0, eq);
            std::string val = line.substr(eq + 1);
            while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
            size_t v = val.find_first_not_of(" \t");
            val = v == std::string::npos ? "" : val.substr(v);
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + " has empty key");
            kv.set(key, val);
        }
        return kv;
    }

    static KeyVal load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file: " + path);
        std::ostringstream os;
        os << in.rdbuf();
        return parse(os.str());
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write config file: " + path);
        out << serialize();
    }

private:
    std::vector<std::pair<std::string, std::string>> pairs_;
};

} // namespace transop
