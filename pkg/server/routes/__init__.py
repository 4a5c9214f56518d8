from .admin import admin_bp
from .federation import FederatedPathConverter, RESERVED_PREFIX, federation_bp

__all__ = ['admin_bp', 'federation_bp', 'FederatedPathConverter', 'RESERVED_PREFIX']
