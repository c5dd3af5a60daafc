"""
JSON and JSON-lines persistence for every artifact the toolkit reads or writes.

Decoders and encoders are extracted from the artifact dataclasses; `float` is registered as a special type on
the decoder because `pytyped-json` only decodes numbers to `Decimal` out of the box.
"""
import json
import os
from typing import Iterable
from typing import List
from typing import Type
from typing import TypeVar

from pytyped.json.decoder import AutoJsonDecoder
from pytyped.json.decoder import JsonDecoder
from pytyped.json.decoder import JsonMappedDecoder
from pytyped.json.decoder import json_number_decoder
from pytyped.json.encoder import AutoJsonEncoder
from pytyped.json.encoder import JsonEncoder

from tetree.errors import DataException

T = TypeVar("T")

_auto_json_decoder = AutoJsonDecoder()
_auto_json_decoder.add_special(float, JsonMappedDecoder(json_number_decoder, float))
_auto_json_encoder = AutoJsonEncoder()


def decoder_for(t: Type[T]) -> JsonDecoder[T]:
    return _auto_json_decoder.extract(t)


def encoder_for(t: Type[T]) -> JsonEncoder[T]:
    return _auto_json_encoder.extract(t)


def dumps(value: T, encoder: JsonEncoder[T]) -> str:
    return json.dumps(encoder.write(value), ensure_ascii=False, sort_keys=True)


def read_json(path: str, decoder: JsonDecoder[T]) -> T:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataException("Malformed JSON in %s at line %d column %d: %s." % (path, e.lineno, e.colno, e.msg))
    return decoder.read(raw)


def write_json(path: str, value: T, encoder: JsonEncoder[T]) -> None:
    write_text_atomically(path, json.dumps(encoder.write(value), ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def read_jsonl(path: str, decoder: JsonDecoder[T]) -> List[T]:
    values: List[T] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataException("Malformed JSON in %s at line %d column %d: %s." % (path, number, e.colno, e.msg))
            values.append(decoder.read(raw))
    return values


def write_jsonl(path: str, values: Iterable[T], encoder: JsonEncoder[T]) -> None:
    write_text_atomically(path, "".join(dumps(v, encoder) + "\n" for v in values))


def append_jsonl(path: str, value: T, encoder: JsonEncoder[T]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(dumps(value, encoder) + "\n")


def write_text_atomically(path: str, text: str) -> None:
    tmp_path = "%s.tmp-%d" % (path, os.getpid())
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp_path, path)