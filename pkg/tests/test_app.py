import pytest

from app import app
from tensor_core import write_tns


@pytest.fixture
def client(tmp_path, worked_example):
    write_tns(worked_example, tmp_path / 'example.tns')
    (tmp_path / 'broken.tns').write_text("1 1 2.0\n")
    app.config.update(TESTING=True, TENKIT_DATA_DIR=str(tmp_path))
    with app.test_client() as c:
        yield c


def test_index_lists_tensors(client):
    resp = client.get('/')
    assert resp.status_code == 200
    names = [t['name'] for t in resp.get_json()['tensors']]
    assert names == ['broken', 'example']


def test_inspect(client):
    resp = client.get('/tensor/example/inspect')
    assert resp.status_code == 200
    doc = resp.get_json()
    assert doc['nnz'] == 8
    first = doc['modes'][0]
    assert first['storage']['hbcsf']['index_words'] == 19
    assert first['census'] == {'COO': 1, 'CSL': 1, 'CSF': 1}


def test_inspect_single_mode_order(client):
    resp = client.get('/tensor/example/inspect?mode_order=2,0,1&value_bits=32')
    assert resp.status_code == 200
    doc = resp.get_json()
    assert [m['mode_order'] for m in doc['modes']] == [[2, 0, 1]]
    assert doc['modes'][0]['storage']['coo']['value_bytes'] == 8 * 4


def test_simulate(client):
    resp = client.get('/tensor/example/simulate?thresholds=inf,2&block_size=2&warp_size=1&sms=2')
    assert resp.status_code == 200
    sweep = resp.get_json()['sweep']
    assert [row['threshold'] for row in sweep] == ['inf', 2]
    assert sweep[1]['makespan'] <= sweep[0]['makespan']


def test_unknown_tensor_is_404(client):
    assert client.get('/tensor/nope/inspect').status_code == 404
    assert client.get('/tensor/..example/simulate').status_code == 404


def test_bad_arguments_are_400(client):
    assert client.get('/tensor/example/inspect?mode_order=0,0,1').status_code == 400
    assert client.get('/tensor/example/simulate?thresholds=abc').status_code == 400
    assert client.get('/tensor/example/simulate?sms=many').status_code == 400
    resp = client.get('/tensor/example/inspect?value_bits=16')
    assert resp.status_code == 400
    assert 'error' in resp.get_json()


def test_unparseable_tensor_is_422(client):
    resp = client.get('/tensor/broken/inspect')
    assert resp.status_code == 422
    assert 'error' in resp.get_json()
