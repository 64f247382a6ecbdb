#include "iip/config_file.hpp"

#include "iip/model.hpp"

#include <fstream>
#include <sstream>

namespace iip {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::map<std::string, std::string> parse_key_values(std::string_view text, const std::string& source) {
    std::map<std::string, std::string> out;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        const std::string where = source + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (!out.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    }
    return out;
}

std::map<std::string, std::string> load_key_values(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_key_values(ss.str(), path.string());
}

}  // namespace iip
