import numpy as np, time, json, sys
from dcic import training as tr, data, bitstream
from dcic.compression import to_signal
from dcic.tensor import Tensor

results = {}
for sigma in [1.0, 4.0, 8.0]:
    cfg = tr.CompressorTrainConfig(channels=8, beta=600.0, target_entropy=0.8, sigma=sigma,
                                   iterations=500, batch_size=8, train_images=384,
                                   probe_images=4, probe_size=256, seed=11, log_interval=100)
    t0 = time.time()
    model, trace = tr.train_compressor(cfg, quiet=True)
    dt = time.time() - t0
    # hard entropy + bpp on probe
    probe = data.generate_synthetic(cfg.seed + 1, 6, 256)
    hard_bits = []
    bpps = []
    mses = []
    for img in probe.images.astype(np.float32):
        x = Tensor(to_signal(img)[None])
        syms, vals = model.compress(x)
        counts = np.bincount(syms.reshape(-1), minlength=model.num_centers).astype(float)
        p = counts / counts.sum(); p = p[p > 0]
        hard_bits.append(-(p * np.log2(p)).sum())
        stream = bitstream.serialize(syms[0], model.centers.data, (256, 256))
        bpps.append(bitstream.measured_bpp(stream, 256, 256))
        recon = model.decode(Tensor(vals)).data
        mses.append(float(((to_signal(img)[None] - recon) ** 2).mean()))
    row = dict(sigma=sigma, trace_tail=trace[-1], hard_entropy=float(np.mean(hard_bits)),
               probe_bpp=float(np.mean(bpps)), probe_mse_signal=float(np.mean(mses)),
               centers=model.centers.data.tolist(), secs=dt)
    print(json.dumps(row), flush=True)
    results[sigma] = row
json.dump(results, open('/root/pkg/.calib/sigma_results.json', 'w'), indent=1)
