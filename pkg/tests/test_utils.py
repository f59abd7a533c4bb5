# tests/test_utils.py
import os

import pytest

from markerforge.errors import DataError
from markerforge.utils import (atomic_write_bytes, is_image_file, list_image_files, read_json,
                               tree_digest, write_json)


def test_is_image_file():
    assert is_image_file('a.PNG')
    assert is_image_file('b.jpeg')
    assert not is_image_file('c.txt')


def test_list_image_files_sorted(tmp_path):
    for name in ['b.png', 'a.jpg', 'notes.txt']:
        (tmp_path / name).write_bytes(b'x')
    files = list_image_files(str(tmp_path))
    assert [os.path.basename(f) for f in files] == ['a.jpg', 'b.png']


def test_list_image_files_missing_dir():
    with pytest.raises(DataError):
        list_image_files('/nonexistent/images')


def test_atomic_write_leaves_no_temp_file(tmp_path):
    path = tmp_path / 'sub' / 'data.bin'
    atomic_write_bytes(str(path), b'abc')
    assert path.read_bytes() == b'abc'
    assert os.listdir(tmp_path / 'sub') == ['data.bin']


def test_json_is_stable(tmp_path):
    a = tmp_path / 'a.json'
    b = tmp_path / 'b.json'
    write_json(str(a), {'b': 1, 'a': [1, 2], '名称': '标记'})
    write_json(str(b), {'名称': '标记', 'a': [1, 2], 'b': 1})
    assert a.read_bytes() == b.read_bytes()
    assert read_json(str(a))['名称'] == '标记'


def test_read_json_errors(tmp_path):
    with pytest.raises(DataError):
        read_json(str(tmp_path / 'missing.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json')
    with pytest.raises(DataError):
        read_json(str(bad))


def test_tree_digest_tracks_content_and_names(tmp_path):
    root = tmp_path / 'tree'
    (root / 'x').mkdir(parents=True)
    (root / 'x' / 'f.txt').write_bytes(b'1')
    first = tree_digest(str(root))
    assert tree_digest(str(root)) == first
    (root / 'x' / 'f.txt').write_bytes(b'2')
    assert tree_digest(str(root)) != first
