#pragma once

// Shared helpers for the test suites: scratch pool files and fork-based
// multi-process runners.

#include "poolkv/pool.hpp"

#include <sys/stat.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

namespace testutil {

inline std::string scratch_dir() {
    static std::string dir = [] {
        std::string d = "/tmp/poolkv-tests-" + std::to_string(::getpid());
        ::mkdir(d.c_str(), 0755);
        return d;
    }();
    return dir;
}


inline std::string scratch_path(const std::string& name) {
    static int counter = 0;
    return scratch_dir() + "/" + name + "-" + std::to_string(counter++);
}

inline std::string make_dir(const std::string& name) {
    std::string d = scratch_path(name);
    ::mkdir(d.c_str(), 0755);
    return d;
}

struct ScopedPoolFile {
    std::string path;
    explicit ScopedPoolFile(const std::string& name) : path(scratch_path(name)) {}
    ~ScopedPoolFile() { ::unlink(path.c_str()); }
};

// Run fn in a forked child; returns the child's exit code. The child
// terminates with _exit so no test-framework state leaks back.
inline pid_t spawn(const std::function<int()>& fn) {
    pid_t pid = ::fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        int rc = 1;
        try {
            rc = fn();
        } catch (...) {
            rc = 2;
        }
        ::_exit(rc);
    }
    return pid;
}

inline int wait_exit(pid_t pid) {
    int status = 0;
    if (::waitpid(pid, &status, 0) != pid) return -1;
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    return -2;
}

inline std::vector<int> run_processes(std::size_t n, const std::function<int(std::size_t)>& fn) {
    std::vector<pid_t> pids;
    pids.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        pids.push_back(spawn([&fn, i] { return fn(i); }));
    std::vector<int> codes;
    codes.reserve(n);
    for (pid_t p : pids) codes.push_back(wait_exit(p));
    return codes;
}

} // namespace testutil
