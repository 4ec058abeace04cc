import os

# pin the default pool so test timings do not depend on the host
os.environ.setdefault("CRIT_AVALANCHE_WORKERS", "2")
