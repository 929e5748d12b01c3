"""Energy-consumption forecasting for BLE sensor nodes.

Core pieces: a from-scratch two-layer projected LSTM (``nncore``), the
1 kHz sum/max downsampling and windowing pipeline (``dataset``), a
synthetic four-node trace generator (``synthgen``), training with early
stopping (``trainer``), MAPE evaluation and reports (``evaluation``),
plus a FastAPI service (``service``) and the ``energyfc`` CLI.
"""

__version__ = "0.1.0"
