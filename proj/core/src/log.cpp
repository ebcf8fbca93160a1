#include "infosteer/log.hpp"

#include <iostream>
#include <mutex>

namespace infosteer {

namespace {

std::mutex& handler_mutex() {
    static std::mutex m;
    return m;
}

WarningHandler& handler() {
    static WarningHandler h;
    return h;
}

}  // namespace

void set_warning_handler(WarningHandler h) {
    std::lock_guard<std::mutex> lock(handler_mutex());
    handler() = std::move(h);
}

void warn(const std::string& message) {
    std::lock_guard<std::mutex> lock(handler_mutex());
    if (handler()) {
        handler()(message);
    } else {
        std::cerr << "warning: " << message << '\n';
    }
}

}  // namespace infosteer
