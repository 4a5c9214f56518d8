import urllib.parse
from typing import Any, Dict, Iterable, List, Optional

import click
import requests
from lxml import etree

from client.utils.helpers import format_response, format_entries

DAV_NS = 'DAV:'
RESERVED_PREFIX = '/.well-known/fedgate'


class FederationClientError(Exception):
    """The gateway or the endpoint it redirected to refused a request"""

    def __init__(self, message: str, status_code: Optional[int] = None):
        super().__init__(message)
        self.status_code = status_code


class FederationClient:
    """Client for a fedgate storage federation gateway"""

    def __init__(self, base_url: str = "http://127.0.0.1:8080", subject: Optional[str] = None,
                 attributes: Iterable[str] = (), forwarded_for: Optional[str] = None,
                 timeout: float = 30.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout
        self.session = requests.Session()
        # identity headers are only honoured by gateways running insecure_header_auth
        if subject:
            self.session.headers['X-Fed-Subject'] = subject
            attributes = list(attributes)
            if attributes:
                self.session.headers['X-Fed-Attributes'] = ','.join(attributes)
        if forwarded_for:
            self.session.headers['X-Forwarded-For'] = forwarded_for

    def url_for(self, path: str) -> str:
        return self.base_url + urllib.parse.quote(path, safe='/-_.~')

    def close(self) -> None:
        self.session.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    # gateway administration

    def health_check(self) -> Dict[str, Any]:
        """Check if the gateway is running"""
        try:
            response = self.session.get(f"{self.base_url}{RESERVED_PREFIX}/healthz", timeout=self.timeout)
            response.raise_for_status()
            return response.json()
        except requests.RequestException as e:
            return {"error": f"Health check failed: {str(e)}"}

    def status(self) -> Dict[str, Any]:
        """Per-endpoint health as seen by the gateway"""
        try:
            response = self.session.get(f"{self.base_url}{RESERVED_PREFIX}/status", timeout=self.timeout)
            response.raise_for_status()
            return response.json()
        except requests.RequestException as e:
            return {"error": f"Failed to get status: {str(e)}"}

    def metrics(self) -> Dict[str, Any]:
        """Gateway counters keyed by series (name plus labels)"""
        try:
            response = self.session.get(f"{self.base_url}{RESERVED_PREFIX}/metrics", timeout=self.timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            return {"error": f"Failed to get metrics: {str(e)}"}
        series = {}
        for line in response.text.splitlines():
            if line.strip() and not line.startswith('#'):
                name, _, value = line.rpartition(' ')
                series[name] = int(float(value))
        return {"success": True, "metrics": series}

    # namespace operations

    def request(self, method: str, path: str, **kwargs) -> requests.Response:
        """One gateway request; redirects are returned, not followed"""
        kwargs.setdefault('timeout', self.timeout)
        return self.session.request(method, self.url_for(path), allow_redirects=False, **kwargs)

    def _redirect(self, method: str, path: str, expected: int, **kwargs) -> str:
        response = self.request(method, path, **kwargs)
        if response.status_code != expected:
            raise FederationClientError(
                f"{method} {path}: gateway answered {response.status_code}: {_error_text(response)}",
                response.status_code)
        return response.headers['Location']

    def locate(self, path: str) -> str:
        """Signed URL of the replica the gateway picks for this client"""
        return self._redirect('GET', path, 302)

    def stat(self, path: str) -> Dict[str, Any]:
        """Size and type of a federated path without a redirect"""
        response = self.request('HEAD', path)
        if response.status_code != 200:
            return {"error": f"HEAD {path} failed with HTTP {response.status_code}",
                    "status_code": response.status_code}
        content_type = response.headers.get('Content-Type', '')
        return {
            "success": True,
            "path": path,
            "is_directory": content_type.startswith('httpd/unix-directory'),
            "size": int(response.headers.get('Content-Length', 0)),
            "last_modified": response.headers.get('Last-Modified'),
        }

    def get_object(self, path: str) -> bytes:
        """Download through the gateway's redirect"""
        location = self._redirect('GET', path, 302)
        response = requests.get(location, timeout=self.timeout)
        if response.status_code != 200:
            raise FederationClientError(f"GET {location} failed with HTTP {response.status_code}",
                                        response.status_code)
        return response.content

    def put_object(self, path: str, data: bytes) -> int:
        """Upload: ask the gateway where, then send the body there"""
        location = self._redirect('PUT', path, 307)
        response = requests.put(location, data=data, timeout=self.timeout)
        if response.status_code not in (200, 201, 204):
            raise FederationClientError(f"PUT {location} failed with HTTP {response.status_code}",
                                        response.status_code)
        return response.status_code

    def delete_object(self, path: str) -> int:
        location = self._redirect('DELETE', path, 307)
        response = requests.delete(location, timeout=self.timeout)
        if response.status_code not in (200, 202, 204):
            raise FederationClientError(f"DELETE {location} failed with HTTP {response.status_code}",
                                        response.status_code)
        return response.status_code

    def list_directory(self, path: str, depth: int = 1) -> List[Dict[str, Any]]:
        """PROPFIND entries, the requested resource first"""
        response = self.request('PROPFIND', path, headers={'Depth': str(depth)})
        if response.status_code != 207:
            raise FederationClientError(
                f"PROPFIND {path}: gateway answered {response.status_code}: {_error_text(response)}",
                response.status_code)
        return parse_multistatus(response.content)


def _error_text(response: requests.Response) -> str:
    try:
        return response.json().get('error', '')
    except ValueError:
        return response.text[:200]


def parse_multistatus(body: bytes) -> List[Dict[str, Any]]:
    """Entries of a 207 body as dicts with path, name, is_directory, size"""
    root = etree.fromstring(body)
    entries = []
    for response in root.iter(f'{{{DAV_NS}}}response'):
        href = urllib.parse.unquote(response.findtext(f'{{{DAV_NS}}}href') or '')
        path = href.rstrip('/') or '/'
        size = response.findtext(f'.//{{{DAV_NS}}}getcontentlength')
        entries.append({
            'path': path,
            'name': path.rsplit('/', 1)[-1],
            'is_directory': response.find(
                f'.//{{{DAV_NS}}}resourcetype/{{{DAV_NS}}}collection') is not None,
            'size': int(size) if size is not None else None,
            'last_modified': response.findtext(f'.//{{{DAV_NS}}}getlastmodified'),
        })
    return entries


@click.command()
@click.option("--url", default="http://127.0.0.1:8080", show_default=True, help="Gateway base URL")
@click.option("--subject", help="Client DN (gateways with insecure_header_auth only)")
@click.argument("path", default="/")
def main(url, subject, path):
    """Show endpoint status and list PATH through a gateway"""
    with FederationClient(url, subject=subject) as client:
        click.echo(format_response(client.status()))
        try:
            click.echo(format_entries(client.list_directory(path)))
        except FederationClientError as e:
            click.echo(format_response({"error": str(e)}))


if __name__ == "__main__":
    main()
