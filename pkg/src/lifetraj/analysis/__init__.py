from .geocode import Geocoder, normalize_query
from .network import (
    Edge,
    InteractionGraph,
    build_interaction_network,
    normalize_location,
    pagerank,
    parse_year_range,
    snapshot,
    snapshots,
)
from .trajectory import (
    OTHER_TYPE,
    TrajectoryRecord,
    build_records,
    load_verb_map,
    normalize_time,
    resolve_person,
    verb_histogram,
)
