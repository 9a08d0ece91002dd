#pragma once

#include "spectod/text.hpp"
#include "spectod/schema_registry.hpp"
#include "spectod/dialogue_core.hpp"
#include "spectod/db_engine.hpp"
#include "spectod/prompt_builder.hpp"
#include "spectod/resources.hpp"
#include "spectod/corpus_ingest.hpp"
#include "spectod/llm_backend.hpp"
#include "spectod/orchestrator.hpp"
#include "spectod/exporter.hpp"
#include "spectod/evaluator.hpp"
