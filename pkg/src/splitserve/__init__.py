"""Split execution of frozen transformer layers behind a shared, stateless
layer service, with client-owned adapters, attention, KV cache, and
optimizer state.

The package has three tiers:
  * numeric core and model definition: tensor_ops, config, adapters, model
  * runtime: executor (the shared service), transport (local / byte-stream
    channels), client (virtualized model and jobs), privacy (activation
    blinding), ledger (byte-exact memory accounting)
  * orchestration: harness (scenario runner and oracle verification), cli
"""

from .adapters import AdapterState, Adam, SGD, apply_adapter, make_optimizer
from .client import (ClientJob, ClientModel, JobConfig, KVCache, LocalAffine,
                     VirtLayer, make_adapter)
from .config import (IA3_ROLES, LayerAddress, ModelConfig, Role,
                     base_addresses, layer_dims, max_layer_width)
from .errors import (ConfigError, JobStateError, ProtocolError,
                     ShapeMismatchError, TransportError)
from .executor import BaseExecutor, BatchPolicy, ExecutorMetrics
from .harness import (NAMED_SCENARIOS, JobResult, RunResult, Scenario,
                      VerifyReport, named_scenario, run, verify)
from .ledger import (MemoryLedger, capacity_check, crossover_context_length,
                     decode_step_transfer_bytes, kv_cache_bytes,
                     packing_report, write_ledger_csv)
from .model import (BaseModel, RefKVCache, build_model, load_base_half,
                    load_checkpoint, load_client_half, reference_forward,
                    reference_loss, save_checkpoint)
from .privacy import NoiseSet, PrivacyConfig, precompute_noise
from .protocol import Envelope, decode, encode, try_decode
from .tensor_ops import AffineParams, affine_forward, cross_entropy, matmul
from .transport import ExecutorServer, LocalChannel, RemoteChannel, SharedBuffer

__version__ = "0.1.0"
