"""Oblivious content delivery testbed.

Publishers push padded, block-encrypted objects to cache nodes under keyed,
fixed-length identifiers; cache nodes store and serve them without ever
seeing a URL, a plaintext byte, or a client address.  Clients reach the
key-holding exit proxies over source-routed peer paths and get responses
multicast to every route member, so nobody on the path can single out the
originator.

Role modules:

* :mod:`ocdn.core`        -- crypto primitives, identifier obfuscation, the
  content envelope and its wire codec.
* :mod:`ocdn.ring`        -- consistent-hash circle, self-certifying proxy
  identities, signed membership rosters.
* :mod:`ocdn.cachenode`   -- the oblivious edge store (HTTP object cache).
* :mod:`ocdn.keydist`     -- DNS-style shared-key directory and the
  proxy-side fetcher with expiry-aware caching.
* :mod:`ocdn.publisher`   -- origin pipeline: obfuscate, encode, push,
  update, rotate.
* :mod:`ocdn.exitproxy`   -- key-holding proxy terminating client routes.
* :mod:`ocdn.clientproxy` -- peer node: builds, forwards and decrypts
  routed requests.
* :mod:`ocdn.simharness`  -- deterministic in-process testbed and the
  adversary analyses.
* :mod:`ocdn.cli`         -- the `ocdn` entry point exposing every role.
"""

__version__ = "0.1.0"
