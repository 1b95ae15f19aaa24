from .dataset import (
    BeatDataset,
    denormalize_record,
    normalize_record,
    read_beats_csv,
    segment_beats,
    split_dataset,
    window_bounds,
    write_beats_csv,
)
from .synth import record_offsets, synth_beat, synth_corpus, synth_record, template
from .wfdb import (
    BEAT_SYMBOLS,
    Annotation,
    AnnotationParseError,
    HeaderParseError,
    RecordHeader,
    SignalSpec,
    adc_to_physical,
    decode_format212,
    encode_format212,
    parse_annotations,
    parse_wfdb_header,
    read_record,
)
