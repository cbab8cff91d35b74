from lisnownet.kernels import BACKEND
