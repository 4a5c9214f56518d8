"""
fedgate command line: serve, check and resolve.
"""

import logging
import sys

import click

from client.utils.helpers import format_replicas
from config.settings import resolve_config_path
from server.app import StartupError, serve as serve_gateway
from server.config import ConfigError, load_config, validate_prefix
from server.models.authz import MembershipRegistry
from server.models.federation import FederationService
from server.models.geo import GeoDatabase, GeoDatabaseError

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR']


def _load(config_path):
    path = resolve_config_path(config_path)
    if not path:
        click.echo("❌ No config: pass --config or set FEDGATE_CONFIG", err=True)
        sys.exit(1)
    try:
        return load_config(path)
    except ConfigError as e:
        click.echo(f"❌ {str(e)}", err=True)
        sys.exit(1)


config_option = click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                             help='Federation config file (default: $FEDGATE_CONFIG)')


@click.group()
def fedgate():
    """Dynamic storage federation gateway"""


@fedgate.command()
@config_option
@click.option('--listen', help='host:port to bind, overriding listen_address')
@click.option('--log-level', default='INFO', show_default=True,
              type=click.Choice(LOG_LEVELS, case_sensitive=False))
def serve(config_path, listen, log_level):
    """Serve the federation until SIGTERM/SIGINT"""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT)
    config = _load(config_path)
    try:
        serve_gateway(config, listen)
    except (StartupError, ConfigError, OSError, GeoDatabaseError) as e:
        click.echo(f"❌ Startup failed: {str(e)}", err=True)
        sys.exit(1)


@fedgate.command()
@config_option
def check(config_path):
    """Validate a config file and the files it references"""
    config = _load(config_path)
    try:
        geo = GeoDatabase.load(config.geo_db_path) if config.geo_db_path else GeoDatabase()
        registry = MembershipRegistry.load(config.members_path, config.privileged_path,
                                           config.required_attribute_prefix)
    except (OSError, GeoDatabaseError) as e:
        click.echo(f"❌ {str(e)}", err=True)
        sys.exit(1)
    click.echo(f"✅ {len(config.endpoints)} endpoints, {len(geo)} geo entries, "
               f"{len(registry.members)} members, {len(registry.privileged)} privileged")
    for endpoint in config.endpoints:
        mode = 'rw' if endpoint.writable else 'ro'
        click.echo(f"  • {endpoint.id} ({endpoint.kind.value}, {mode}): "
                   f"{endpoint.federated_prefix} -> {endpoint.base_url}{endpoint.backend_prefix}")


@fedgate.command()
@click.argument('path')
@config_option
@click.option('--client-ip', help='Rank replicas for a client at this address')
def resolve(path, config_path, client_ip):
    """Print the ranked replica list of PATH without serving"""
    logging.basicConfig(level=logging.WARNING, format=LOG_FORMAT)
    config = _load(config_path)
    try:
        path = validate_prefix(path)
    except ConfigError as e:
        raise click.BadParameter(str(e), param_hint='PATH')
    federation = FederationService(config)
    try:
        replica_set = federation.locator.locate(path)
        client = federation.geo.lookup(client_ip) if client_ip else None
        ranked = federation.rank_replicas(replica_set.replicas, client)
        click.echo(format_replicas(path, ranked, replica_set.complete))
    finally:
        federation.close()
    if not replica_set.found:
        sys.exit(1)


if __name__ == '__main__':
    fedgate()
