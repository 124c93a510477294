import json
import logging

logger = logging.getLogger(__name__)


def _dumps(record):
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class SearchLog:
    """
    Append-only record stream of one search run

    Record types: "iter" (losses, g, λ, γ), "prune" (PruneEvent),
    "epoch" (per-site p and rank-ordered S/V/m) and "finish". Lines carry
    no timestamps, so equal seeds give byte-identical files.
    """

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(dict(record))

    def extend(self, records):
        for record in records:
            self.append(record)

    def of_type(self, kind):
        return [r for r in self.records if r.get("type") == kind]

    def prune_events(self):
        return self.of_type("prune")

    def to_text(self):
        return "".join(_dumps(r) + "\n" for r in self.records)

    def save(self, path):
        """
        Write the log as line-delimited JSON

        Returns:
            bool: True if the file was written
        """
        try:
            with open(path, "w", encoding="utf-8") as f:
                f.write(self.to_text())
            logger.info(f"Search log with {len(self.records)} records written to {path}")
            return True
        except Exception as e:
            logger.error(f"Error writing search log to {path}: {e}")
            return False

    @classmethod
    def load(cls, path):
        """
        Read a log; a damaged tail is dropped with a warning

        Returns:
            tuple: (SearchLog, truncated flag)
        """
        log = cls()
        truncated = False
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    log.append(json.loads(line))
                except json.JSONDecodeError:
                    logger.warning(f"{path}: line {lineno} is not valid JSON; keeping the first {len(log.records)} records")
                    truncated = True
                    break
        return log, truncated


def save_events(events, path):
    """Write a PruneEvent stream, one JSON object per line"""
    try:
        with open(path, "w", encoding="utf-8") as f:
            for event in events:
                record = event.to_record() if hasattr(event, "to_record") else event
                f.write(_dumps(record) + "\n")
        logger.info(f"{len(events)} prune events written to {path}")
        return True
    except Exception as e:
        logger.error(f"Error writing prune events to {path}: {e}")
        return False


def load_events(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
