"""A Model Context Protocol server exposing the vocabulary store to any MCP-capable language model host. Speaks
JSON-RPC 2.0 over stdin/stdout with one compact JSON message per line, and offers two tools (search_athena and
get_concept_details) and three read-only resources with OMOP guidance (omop://tables, omop://vocabulary-preferences
and omop://best-practices).

Requests are handled strictly in arrival order; each server instance is one session."""

__author__ = 'OMOP MCP contributors'
__copyright__ = 'Copyright (c) 2026 OMOP MCP contributors'
__license__ = 'Apache 2.0'
__version__ = '2026-10-17'  # ISO 8601 (YYYY-MM-DD)

import dataclasses
import json

from athenagateway import MAX_PAGE_SIZE, DEFAULT_PAGE_SIZE, SearchFilters
from omophelpers import OmopMcpError, Utils
from preferenceengine import PreferenceProfile, render_preferences
from vocabularycore import OMOP_TABLES, InvalidId

SERVER_NAME = 'omop-mcp'
PROTOCOL_VERSION = '2024-11-05'

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603
RESOURCE_NOT_FOUND = -32002

BEST_PRACTICES = '\n'.join([
    'OMOP concept mapping guidance:',
    '- Map every source term to a standard concept (standard_concept = S) in the domain of its target table.',
    '- Prefer valid concepts; deprecated or upgraded concepts must not be used for new mappings.',
    '- Expand abbreviations and correct misspellings before searching (e.g., "CP" in a condition context is chest '
    'pain).',
    '- Use SNOMED for conditions and procedures, RxNorm for drugs and LOINC for measurements unless the user asks for '
    'a different vocabulary.',
    '- Always look concept IDs up with the search tool; never answer with a concept ID that was not retrieved.',
    '- Copy concept_id and concept_name exactly as the vocabulary returns them.',
    '- When none of the candidates fits, report that no mapping was found rather than choosing a loose match.'
])


class JsonRpcError(OmopMcpError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    input_schema: dict

    def to_dict(self):
        return {'name': self.name, 'description': self.description, 'inputSchema': self.input_schema}


@dataclasses.dataclass(frozen=True)
class ResourceDescriptor:
    uri: str
    name: str
    mime_type: str
    content: str

    def to_dict(self):
        return {'uri': self.uri, 'name': self.name, 'mimeType': self.mime_type}


SEARCH_TOOL = ToolDescriptor(
    name='search_athena',
    description='Search the OHDSI Athena vocabulary for concepts matching a keyword. Returns candidate concepts with '
                'their concept ID, name, domain, vocabulary, class, standard flag and validity.',
    input_schema={
        'type': 'object',
        'properties': {
            'keyword': {'type': 'string', 'description': 'The medical term to search for'},
            'domain': {'type': 'string', 'description': 'Restrict results to an OMOP domain (e.g., Condition)'},
            'vocabulary': {'type': 'string', 'description': 'Restrict results to a vocabulary (e.g., SNOMED)'},
            'standard_only': {'type': 'boolean', 'description': 'Only return standard concepts'},
            'page_size': {'type': 'integer', 'minimum': 1, 'maximum': MAX_PAGE_SIZE,
                          'description': 'Maximum number of candidates (default %d)' % DEFAULT_PAGE_SIZE}
        },
        'required': ['keyword']
    })

CONCEPT_TOOL = ToolDescriptor(
    name='get_concept_details',
    description='Look up a single OMOP concept by its concept ID.',
    input_schema={
        'type': 'object',
        'properties': {'concept_id': {'type': 'integer', 'minimum': 1, 'description': 'The OMOP concept ID'}},
        'required': ['concept_id']
    })


def default_tools():
    return [SEARCH_TOOL, CONCEPT_TOOL]


def render_tables():
    lines = ['OMOP CDM tables that hold mapped concepts (table: domain, concept field):']
    for table, (domain, field) in OMOP_TABLES.items():
        lines.append('- %s: %s, %s' % (table, domain, field))
    return '\n'.join(lines)


def register_default_resources(profile=None):
    return [
        ResourceDescriptor(uri='omop://tables', name='OMOP event tables', mime_type='text/plain',
                           content=render_tables()),
        ResourceDescriptor(uri='omop://vocabulary-preferences', name='Vocabulary preferences', mime_type='text/plain',
                           content=render_preferences(profile or PreferenceProfile())),
        ResourceDescriptor(uri='omop://best-practices', name='Mapping best practices', mime_type='text/plain',
                           content=BEST_PRACTICES)
    ]


def compact_json(value):
    return json.dumps(value, ensure_ascii=False, separators=(',', ':'))


def text_content(text, is_error=False):
    return {'content': [{'type': 'text', 'text': text}], 'isError': is_error}


class McpServer:
    def __init__(self, store, resources=None, tools=None):
        self.store = store
        self.resources = {}
        for resource in resources if resources is not None else register_default_resources():
            if resource.uri in self.resources:
                raise ValueError('duplicate resource URI %s' % resource.uri)
            self.resources[resource.uri] = resource
        self.tools = {}
        for tool in tools or default_tools():
            if tool.name in self.tools:
                raise ValueError('duplicate tool name %s' % tool.name)
            self.tools[tool.name] = tool
        self.tool_handlers = {SEARCH_TOOL.name: self.call_search, CONCEPT_TOOL.name: self.call_concept_details}
        self.methods = {
            'initialize': self.initialize,
            'ping': lambda params: {},
            'tools/list': lambda params: {'tools': [tool.to_dict() for tool in self.tools.values()]},
            'tools/call': self.call_tool,
            'resources/list': lambda params: {'resources': [r.to_dict() for r in self.resources.values()]},
            'resources/read': self.read_resource
        }

    @staticmethod
    def initialize(params):
        return {'protocolVersion': PROTOCOL_VERSION,
                'capabilities': {'tools': {'listChanged': False}, 'resources': {'listChanged': False}},
                'serverInfo': {'name': SERVER_NAME, 'version': __version__}}

    def call_tool(self, params):
        name = params.get('name')
        arguments = params.get('arguments') or {}
        if name not in self.tool_handlers or name not in self.tools:
            raise JsonRpcError(INVALID_PARAMS, 'unknown tool: %s' % name)
        if not isinstance(arguments, dict):
            raise JsonRpcError(INVALID_PARAMS, 'tool arguments must be an object')
        try:
            return self.tool_handlers[name](arguments)
        except JsonRpcError:
            raise
        except OmopMcpError as e:
            # store failures are reported to the model as tool errors, not protocol errors
            return text_content('%s failed: %s' % (name, e), is_error=True)

    def call_search(self, arguments):
        keyword = arguments.get('keyword')
        if not isinstance(keyword, str) or not keyword.strip():
            raise JsonRpcError(INVALID_PARAMS, 'search_athena requires a non-empty keyword')
        page_size = arguments.get('page_size', DEFAULT_PAGE_SIZE)
        if isinstance(page_size, bool) or not isinstance(page_size, int) or not 1 <= page_size <= MAX_PAGE_SIZE:
            raise JsonRpcError(INVALID_PARAMS, 'page_size must be an integer between 1 and %d' % MAX_PAGE_SIZE)
        vocabulary = arguments.get('vocabulary') or ()
        if not isinstance(vocabulary, (str, list, tuple)) or not isinstance(arguments.get('domain') or '', str):
            raise JsonRpcError(INVALID_PARAMS, 'domain and vocabulary must be strings')
        filters = SearchFilters(domain=arguments.get('domain') or None, vocabulary=vocabulary,
                                standard_only=bool(arguments.get('standard_only', False)), page_size=page_size)

        candidates = self.store.search_concepts(keyword, filters)
        return text_content(compact_json({'query': candidates.query, 'total_available': candidates.total_available,
                                          'candidates': [concept.to_dict() for concept in candidates.candidates]}))

    def call_concept_details(self, arguments):
        concept_id = arguments.get('concept_id')
        try:
            concept = self.store.get_concept(concept_id)
        except InvalidId as e:
            raise JsonRpcError(INVALID_PARAMS, str(e)) from None
        if concept is None:
            return text_content('concept ID %d does not exist in the vocabulary' % concept_id, is_error=True)
        return text_content(compact_json(concept.to_dict()))

    def read_resource(self, params):
        uri = params.get('uri')
        if uri not in self.resources:
            raise JsonRpcError(RESOURCE_NOT_FOUND, 'resource not found: %s' % uri)
        resource = self.resources[uri]
        return {'contents': [{'uri': resource.uri, 'mimeType': resource.mime_type, 'text': resource.content}]}

    def handle_message(self, message):
        """Handle one decoded JSON-RPC message, returning the response object or None for notifications"""
        if not isinstance(message, dict) or message.get('jsonrpc') != '2.0' or not isinstance(message.get('method'),
                                                                                                 str):
            request_id = message.get('id') if isinstance(message, dict) else None
            return error_response(request_id if valid_id(request_id) else None, INVALID_REQUEST, 'invalid request')

        is_notification = 'id' not in message
        request_id = message.get('id')
        if not is_notification and not valid_id(request_id):
            return error_response(None, INVALID_REQUEST, 'invalid request id')
        method = message['method']
        params = message.get('params', {})
        if params is None:
            params = {}

        if is_notification:
            return None  # notifications/initialized, notifications/cancelled, ...
        if method not in self.methods:
            return error_response(request_id, METHOD_NOT_FOUND, 'method not found: %s' % method)
        if not isinstance(params, dict):
            return error_response(request_id, INVALID_PARAMS, 'params must be an object')
        try:
            result = self.methods[method](params)
        except JsonRpcError as e:
            return error_response(request_id, e.code, str(e))
        except Exception as e:  # an unexpected failure must still produce a response for this id
            Utils.report('ERROR: unable to handle %s request:' % method, e)
            return error_response(request_id, INTERNAL_ERROR, 'internal error: %s' % e)
        return {'jsonrpc': '2.0', 'id': request_id, 'result': result}

    def handle_frame(self, line):
        """Handle one line of input, returning the response object (or None when nothing should be sent)"""
        if not line.strip():
            return None
        try:
            message = json.loads(line)
        except ValueError:
            return error_response(None, PARSE_ERROR, 'parse error')
        if isinstance(message, list):
            return error_response(None, INVALID_REQUEST, 'batch requests are not supported')
        return self.handle_message(message)

    def serve(self, instream, outstream):
        """Read requests from `instream` until it closes, writing one response line per request to `outstream`.
        Returns True when the input closed normally, or False if the session was ended by a transport error"""
        try:
            for line in instream:
                if isinstance(line, bytes):
                    line = line.decode('utf-8', errors='replace')
                response = self.handle_frame(line)
                if response is not None:
                    outstream.write(compact_json(response) + '\n')
                    outstream.flush()
        except (OSError, ValueError) as e:
            Utils.report('ERROR: MCP session ended by transport error:', e)
            return False
        return True


def valid_id(request_id):
    return request_id is None or (isinstance(request_id, (str, int)) and not isinstance(request_id, bool))


def error_response(request_id, code, message):
    return {'jsonrpc': '2.0', 'id': request_id, 'error': {'code': code, 'message': message}}
