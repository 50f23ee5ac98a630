"""Standalone CIDEr-D and BLEU-4 reference values for the toy test vectors."""
import math
from collections import Counter

TOY = [
    ("a dog barking in the yard", ["a dog barking in the yard", "a dog is barking loudly"]),
    ("the cat sitting on the mat", ["a cat sitting on a mat", "the cat sits on the mat"]),
    ("a bird singing in the tree", ["a bird sings in a tree", "birds singing in the park"]),
]


def ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def all_ngrams(s):
    w = s.split()
    c = Counter()
    for n in range(1, 5):
        c.update(ngrams(w, n))
    return c


def cider_d(items, sigma=6.0):
    refs = [[all_ngrams(r) for r in rs] for _, rs in items]
    df = Counter()
    for rs in refs:
        for g in set(g for r in rs for g in r):
            df[g] += 1
    log_n = math.log(len(items))

    def vec(cnt):
        v = [dict() for _ in range(4)]
        norm = [0.0] * 4
        for g, tf in cnt.items():
            x = tf * (log_n - math.log(max(1.0, df[g])))
            v[len(g) - 1][g] = x
            norm[len(g) - 1] += x * x
        length = sum(tf for g, tf in cnt.items() if len(g) == 2)
        return v, [math.sqrt(x) for x in norm], length

    scores = []
    for (cand, _), rs in zip(items, refs):
        vh, nh, lh = vec(all_ngrams(cand))
        total = [0.0] * 4
        for r in rs:
            vr, nr, lr = vec(r)
            for n in range(4):
                val = sum(min(x, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, x in vh[n].items())
                if nh[n] != 0 and nr[n] != 0:
                    val /= nh[n] * nr[n]
                total[n] += val * math.exp(-((lh - lr) ** 2) / (2 * sigma ** 2))
        scores.append(sum(total) / 4 / len(rs) * 10.0)
    return sum(scores) / len(scores)


def bleu4(cand, ref):
    c, r = cand.split(), ref.split()
    logs = []
    for n in range(1, 5):
        cc, rc = ngrams(c, n), ngrams(r, n)
        m = sum(min(v, rc[g]) for g, v in cc.items())
        t = max(len(c) - n + 1, 0)
        if m == 0:
            if n == 1:
                return 0.0
            m, t = m + 1, t + 1
        logs.append(math.log(m / t))
    bp = 1.0 if len(c) > len(r) else math.exp(1 - len(r) / len(c))
    return bp * math.exp(sum(logs) / 4)


if __name__ == "__main__":
    print(f"cider_d toy = {cider_d(TOY):.12f}")
    print(f"bleu4 = {bleu4('the cat sat on the mat', 'the cat is on the mat'):.12f}")
