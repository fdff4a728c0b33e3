"""Federated-learning orchestration stack.

Modules:
  flmath       model head, SGD training, FedAvg, DP noise, evaluation
  data         synthetic datasets, file I/O, (user x app) partitioning
  protocol     wire schemas, binary model codec, token lifecycle
  coordinator  project store, round state machine, aggregation, persistence
  device       on-device service + per-app library (SA/JS/JM pipelines)
  sim          discrete-event fleet simulator on virtual time
  service      HTTP surface over the coordinator plus the client
  cli          operator entry point (`flaas`)
"""

__version__ = "0.1.0"
