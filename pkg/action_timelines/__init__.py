from .exceptions import *
from .interval import *
from .schedule import *
from .codec import *
from .network import *
from .conditioning import *
from .seeding import *
from .config import *
from .evaluation import *
from .dataset import *
from .checkpoint import *
from .training import *
from .sampler import *
from .renderer import *
from .ablation import *

__version__ = "0.1.0"
