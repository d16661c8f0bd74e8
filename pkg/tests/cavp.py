import os

import cryptography_vectors


def load_short_msg(name):
    """(msg, digest) pairs from a CAVP ``*ShortMsg.rsp`` file."""
    path = os.path.join(os.path.dirname(cryptography_vectors.__file__), "hashes", name)
    vectors, length, msg = [], None, None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("Len ="):
                length = int(line.split("=")[1])
            elif line.startswith("Msg ="):
                msg = bytes.fromhex(line.split("=")[1].strip())[: length // 8]
            elif line.startswith("MD ="):
                vectors.append((msg, bytes.fromhex(line.split("=")[1].strip())))
    return vectors
