"""How audio steers the object queries.

Each query owns a prototype vector. Its cosine with the frame's audio embedding
decides how much of that embedding is added to the query, so queries whose
prototype resembles the current sound move the most. Repeating the audio onto
every query instead adds the full embedding everywhere.
"""
import torch

from aavs.audioquery import QueryBank, generate_queries, prototype_cosine, repeat_queries

torch.manual_seed(0)
torch.set_grad_enabled(False)
bank = QueryBank(num_queries=6, dim=16)
audio = torch.randn(3, 16)

# make query 2 a near copy of the frame-0 sound
bank.p_audio[2] = audio[0] + 0.1 * torch.randn(16)

cos = prototype_cosine(audio, bank.p_audio)
print("cosine (frames x queries)")
print(cos.numpy().round(2))

adaptive = generate_queries(audio, bank.q_obj, bank.p_audio)
repeated = repeat_queries(audio, bank.q_obj)
print("\nshift of each query away from q_obj, frame 0")
print("  adaptive:", (adaptive[0] - bank.q_obj).norm(dim=-1).numpy().round(2))
print("  repeated:", (repeated[0] - bank.q_obj).norm(dim=-1).numpy().round(2))

# scaling a prototype leaves its query unchanged
scaled = generate_queries(audio, bank.q_obj, bank.p_audio * 8.0)
print("\nmax change after scaling every prototype by 8:", float((scaled - adaptive).abs().max()))
