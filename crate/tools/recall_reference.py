#!/usr/bin/env python3
"""Reference generator for the recall task, written without the Rust crates.

Implements ChaCha8 (64-bit block counter, zero stream id), the PCG32 seed
expansion used by `seed_from_u64`, the widening-multiply `below(n)`, and the
partial Fisher-Yates draw. Prints the first instance for a seed as JSON.

    python3 tools/recall_reference.py --seed 7 --pairs 8
"""

import argparse
import json

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF


def rotl(x, n):
    return ((x << n) | (x >> (32 - n))) & MASK32


def quarter(s, a, b, c, d):
    s[a] = (s[a] + s[b]) & MASK32
    s[d] = rotl(s[d] ^ s[a], 16)
    s[c] = (s[c] + s[d]) & MASK32
    s[b] = rotl(s[b] ^ s[c], 12)
    s[a] = (s[a] + s[b]) & MASK32
    s[d] = rotl(s[d] ^ s[a], 8)
    s[c] = (s[c] + s[d]) & MASK32
    s[b] = rotl(s[b] ^ s[c], 7)


def chacha_block(key_words, counter, rounds=8):
    const = [0x61707865, 0x3320646E, 0x79622D32, 0x6B206574]
    init = const + key_words + [counter & MASK32, counter >> 32, 0, 0]
    s = list(init)
    for _ in range(rounds // 2):
        quarter(s, 0, 4, 8, 12)
        quarter(s, 1, 5, 9, 13)
        quarter(s, 2, 6, 10, 14)
        quarter(s, 3, 7, 11, 15)
        quarter(s, 0, 5, 10, 15)
        quarter(s, 1, 6, 11, 12)
        quarter(s, 2, 7, 8, 13)
        quarter(s, 3, 4, 9, 14)
    return [(x + y) & MASK32 for x, y in zip(s, init)]


def pcg32_seed(seed):
    mul = 6364136223846793005
    inc = 11634580027462260723
    state = seed & MASK64
    out = bytearray()
    for _ in range(8):
        state = (state * mul + inc) & MASK64
        xorshifted = (((state >> 18) ^ state) >> 27) & MASK32
        rot = state >> 59
        x = ((xorshifted >> rot) | (xorshifted << ((32 - rot) & 31))) & MASK32
        out += x.to_bytes(4, "little")
    return [int.from_bytes(out[i:i + 4], "little") for i in range(0, 32, 4)]


class ChaCha8:
    def __init__(self, seed):
        self.key = pcg32_seed(seed)
        self.counter = 0
        self.words = []

    def next_u32(self):
        if not self.words:
            self.words = chacha_block(self.key, self.counter)
            self.counter += 1
        return self.words.pop(0)

    def next_u64(self):
        lo = self.next_u32()
        hi = self.next_u32()
        return (hi << 32) | lo

    def below(self, n):
        return (self.next_u64() * n) >> 64

    def distinct(self, n, k):
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def instance(rng, pairs, n_fillers=6, n_keys=32, n_values=16):
    key_base = 2 + n_fillers
    value_base = key_base + n_keys
    keys = [k + key_base for k in rng.distinct(n_keys, pairs)]
    values = [v + value_base for v in rng.distinct(n_values, pairs)]
    probe = rng.below(pairs)
    return {
        "pairs": [[k, v] for k, v in zip(keys, values)],
        "query": [1, keys[probe]],
        "answer": [values[probe]],
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--pairs", type=int, default=8)
    args = ap.parse_args()
    rng = ChaCha8(args.seed)
    first = instance(rng, args.pairs)
    first["seed"] = args.seed
    print(json.dumps(first))


if __name__ == "__main__":
    main()
