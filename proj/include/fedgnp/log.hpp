#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace fedgnp::log {

using Sink = std::function<void(const std::string&)>;

/// Warning sink, replaceable by tests or embedding applications.
inline Sink& warn_sink() {
    static Sink sink = [](const std::string& msg) { std::cerr << "[fedgnp] warning: " << msg << '\n'; };
    return sink;
}

inline void set_warn_sink(Sink sink) { warn_sink() = std::move(sink); }

inline void warn(const std::string& msg) {
    if (warn_sink()) {
        warn_sink()(msg);
    }
}

} // namespace fedgnp::log
