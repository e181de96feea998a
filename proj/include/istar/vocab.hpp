#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace istar {

// Token alphabet shared between an environment and the policies acting in it.
struct Vocab {
    std::vector<std::string> tokens;
    int end_id = -1;

    int size() const { return static_cast<int>(tokens.size()); }
    bool valid(int id) const { return id >= 0 && id < size(); }

    const std::string& name(int id) const {
        if (!valid(id)) throw std::invalid_argument("vocab: token id out of range");
        return tokens[static_cast<std::size_t>(id)];
    }

    int id(const std::string& name) const {
        for (int i = 0; i < size(); ++i)
            if (tokens[static_cast<std::size_t>(i)] == name) return i;
        throw std::invalid_argument("vocab: unknown token '" + name + "'");
    }

    int id_or(const std::string& name, int fallback) const {
        for (int i = 0; i < size(); ++i)
            if (tokens[static_cast<std::size_t>(i)] == name) return i;
        return fallback;
    }
};

}  // namespace istar
