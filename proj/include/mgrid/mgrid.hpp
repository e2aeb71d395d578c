#pragma once

#include "certify.hpp"
#include "contingency.hpp"
#include "controller.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "netmodel.hpp"
#include "powerflow.hpp"
#include "simulation.hpp"
