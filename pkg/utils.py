import json
import logging
import os
import time

# --- DEFAULTS (override through environment / .env) ---
DEFAULT_NODE_LIMIT = 1_000_000
DEFAULT_LP_ENGINE = "highs"
LP_ENGINES = ("highs", "simplex")

log = logging.getLogger(__name__)


def setup_logging(level=None):
    """Configures root logging once for the command-line entry point."""
    level = level or os.getenv("CVR_MPC_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)-7s %(name)s | %(message)s",
    )


def get_node_limit():
    raw = os.getenv("CVR_MPC_NODE_LIMIT")
    if not raw:
        return DEFAULT_NODE_LIMIT
    try:
        limit = int(raw)
    except ValueError:
        log.warning("⚠️ CVR_MPC_NODE_LIMIT=%r is not an integer, using %d", raw, DEFAULT_NODE_LIMIT)
        return DEFAULT_NODE_LIMIT
    return max(1, limit)


def get_lp_engine():
    engine = os.getenv("CVR_MPC_LP_ENGINE", DEFAULT_LP_ENGINE).lower()
    if engine not in LP_ENGINES:
        log.warning("⚠️ Unknown LP engine %r, falling back to %r", engine, DEFAULT_LP_ENGINE)
        return DEFAULT_LP_ENGINE
    return engine


def get_stats_path():
    return os.getenv("CVR_MPC_STATS_PATH") or None


# Global accumulation for one command invocation
SESSION_STATS = {"solves": 0, "nodes": 0, "pivots": 0, "seconds": 0.0}


def reset_session_stats():
    """Resets the solver counters to zero (call at start of a run)."""
    for key in SESSION_STATS:
        SESSION_STATS[key] = 0 if key != "seconds" else 0.0


def get_session_stats():
    return dict(SESSION_STATS)


def log_solver_usage(stage_name, start_time, stats):
    """
    Accumulates one solve into the session counters and, when a stats path
    is configured, appends it as a JSON line.
    """
    duration = time.perf_counter() - start_time

    SESSION_STATS["solves"] += 1
    SESSION_STATS["nodes"] += int(stats.get("nodes", 0))
    SESSION_STATS["pivots"] += int(stats.get("pivots", 0))
    SESSION_STATS["seconds"] += duration

    log.debug(
        "📊 [%s] %s | nodes=%s pivots=%s | %.3fs",
        stage_name, stats.get("status"), stats.get("nodes", 0), stats.get("pivots", 0), duration,
    )

    path = get_stats_path()
    if path:
        record = {"stage": stage_name, "seconds": round(duration, 6)}
        record.update({k: v for k, v in stats.items() if isinstance(v, (int, float, str, type(None)))})
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
