#include "gradtrace/tokenizer.hpp"

#include "gradtrace/errors.hpp"

namespace gradtrace {

std::vector<int> encode(std::string_view text, TextRole role) {
    if (text.empty())
        fail(Errc::length, role == TextRole::query ? "empty query" : "empty response");
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char b : text) ids.push_back(static_cast<int>(b));
    return ids;
}

std::string decode(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id > 255)
            fail(Errc::dimension, "decode: id " + std::to_string(id) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

} // namespace gradtrace
