#pragma once

// Binds a Service to an httplib server. Kept apart from app.hpp so that
// code without a network dependency does not pull in the socket layer.

#include <string>

#include "httplib.h"

#include "akr/app.hpp"

namespace akr {

inline void mount(httplib::Server& srv, const Service& svc)
{
    auto bridge = [&svc](const httplib::Request& req, httplib::Response& res) {
        const auto reply = svc.handle(req.method, req.path, req.body);
        res.status = reply.status;
        res.set_content(reply.body.dump(), "application/json");
    };
    srv.Get("/health", bridge);
    srv.Get("/model", bridge);
    srv.Post("/tokenize", bridge);
    srv.Post("/complete", bridge);
    srv.Post("/score", bridge);
    // anything else gets a JSON 404 from the service
    srv.Get(R"(/.*)", bridge);
    srv.Post(R"(/.*)", bridge);
    // the browser editor runs from a different origin
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
}

}  // namespace akr
